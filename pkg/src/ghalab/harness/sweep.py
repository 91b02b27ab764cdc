"""Grid sweeps over group-loss coefficients or the number of groups."""

from __future__ import annotations

import copy
import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .train import Trainer, probe_compactness

AXES = ("alpha-beta-grid", "group-count")
DEFAULT_ALPHAS = (0.0, 0.5, 1.0)
DEFAULT_BETAS = (0.0, 0.5, 1.0)
ROW_FIELDS = ("cell", "alpha", "beta", "n_groups", "seed", "sc", "di", "homogeneity",
              "diversity", "acc", "ppl", "exact_match")


def derive_seed(base, axis, index):
    """Independent, reproducible seed for one sweep cell."""
    ss = np.random.SeedSequence([int(base), AXES.index(axis), int(index)])
    return int(ss.generate_state(1)[0] % (2**31 - 1))


def sweep_cells(cfg: RunConfig, axis, alphas=DEFAULT_ALPHAS, betas=DEFAULT_BETAS, groups=None):
    """``(label, overrides)`` pairs; each override dict edits the ``group`` section."""
    if axis == "alpha-beta-grid":
        return [(f"a={a:g},b={b:g}", {"alpha": float(a), "beta": float(b)})
                for a in alphas for b in betas]
    if axis == "group-count":
        groups = groups or range(1, cfg.model.n_heads + 1)
        return [(f"C={c}", {"n_groups": int(c)}) for c in groups]
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


@dataclass
class SweepReport:
    axis: str
    rows: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r[k] for k in ROW_FIELDS})
        return buf.getvalue()

    def to_table(self):
        def fmt(v):
            if isinstance(v, float):
                return "n/a" if math.isnan(v) else f"{v:.4f}"
            return str(v)

        cols = ("cell", "sc", "di", "homogeneity", "diversity", "acc")
        lines = ["\t".join(cols)]
        lines += ["\t".join(fmt(r[c]) for c in cols) for r in self.rows]
        return "\n".join(lines) + "\n"


def run_cell(cfg: RunConfig, probe_size=256, out_dir=None):
    """Stage-1 training of one cell, then a compactness probe on the validation split."""
    tr = Trainer(cfg, out_dir=out_dir)
    if out_dir:
        tr._open_logs()
    tr.run_stage1()
    probe = probe_compactness(tr.model, tr.data.valid.first_batch(probe_size), cfg.group,
                              seed=cfg.train.seed)
    ev = tr.stage1_eval
    return {"sc": probe["sc_final"], "di": probe["di_final"],
            "homogeneity": probe["homogeneity"], "diversity": probe["diversity"],
            "acc": ev["acc"], "ppl": ev["ppl"], "exact_match": ev["exact_match"]}


def sweep(cfg: RunConfig, axis, out_dir=None, alphas=DEFAULT_ALPHAS, betas=DEFAULT_BETAS,
          groups=None):
    """Run every cell of ``axis`` (voting disabled) and collect one row per cell."""
    report = SweepReport(axis)
    for i, (label, group_over) in enumerate(sweep_cells(cfg, axis, alphas, betas, groups)):
        cell = copy.deepcopy(cfg)
        for k, v in group_over.items():
            setattr(cell.group, k, v)
        cell.train.v2s = False
        cell.train.seed = derive_seed(cfg.train.seed, axis, i)
        cell.validate()
        cell_dir = os.path.join(out_dir, f"cell{i:02d}") if out_dir else None
        result = run_cell(cell, out_dir=cell_dir)
        report.rows.append({"cell": label, "alpha": cell.group.alpha, "beta": cell.group.beta,
                            "n_groups": cell.group.n_groups, "seed": cell.train.seed, **result})
    if out_dir:
        from ..checkpoint import atomic_write_text

        atomic_write_text(os.path.join(out_dir, "sweep.csv"), report.to_csv())
        atomic_write_text(os.path.join(out_dir, "sweep.txt"), report.to_table())
    return report
