"""Full run on the copy task: grouped training, voting, finetuning of the survivors.

Takes a minute or two on one core. Pass an output directory as the only
argument to keep the artifacts (default: runs/demo).
"""

import json
import logging
import sys

from ghalab.harness import Trainer, load_config

logging.basicConfig(level=logging.INFO, format="%(message)s")

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = load_config(None, ["train.finetune_epochs=30"])
trainer = Trainer(cfg, out_dir=out)
summary = trainer.run()

print(json.dumps({k: summary[k] for k in ("stage", "epochs", "pruned", "heads_per_layer",
                                          "params", "params_after_prune")}, indent=1))
print("stage-1 valid acc", round(summary["stage1_valid"]["acc"], 4))
print("final test acc   ", round(summary["test"]["acc"], 4))
print(trainer.report.to_text().split("\n\n")[1] if trainer.report else "no voting happened")
