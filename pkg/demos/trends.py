"""Group homogeneity and diversity over 400 steps, with and without the group loss."""

import tempfile
from pathlib import Path

from ghalab.harness import Trainer, load_config
from ghalab.metrics import read_metrics

for label, ab in (("grouped", 0.5), ("vanilla", 0.0)):
    out = Path(tempfile.mkdtemp())
    cfg = load_config(None, ["train.v2s=false", f"group.alpha={ab}", f"group.beta={ab}",
                             "train.max_steps=400", "train.log_every=5"])
    Trainer(cfg, out_dir=str(out)).run_stage1()
    rows = read_metrics(out / "metrics.csv")
    print(f"{label}: step  homogeneity  diversity")
    for r in rows[::10] + rows[-1:]:
        print(f"{'':9}{r['step']:>4}  {r['homogeneity']:>11.4f}  {r['diversity']:>9.4f}")
