"""Two-stage training: group-constrained stage 1, voting, task-only stage 2."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..checkpoint import atomic_write_text, read_checkpoint, write_checkpoint
from ..grouping import (
    FM_KINDS,
    GroupingState,
    discover_hidden_units,
    gct_loss_categorical,
    gct_loss_continuous,
    layer_type,
    pool_feature_maps,
)
from ..metrics import (
    MetricsLog,
    count_params,
    dunn_index,
    estimate_flops,
    inter_diversity,
    intra_homogeneity,
    silhouette,
    task_metrics,
)
from ..model import PAD, HeadMask, TransformerModel, apply_head_mask
from ..numerics import Adam, LrSchedule, inverse_sqrt_lr
from ..v2s import run_voting_epoch
from .config import RunConfig, config_from_dict, config_to_dict, dump_config
from .tasks import build_task

log = logging.getLogger(__name__)

STAGES = ("stage1-gct", "voting", "stage2-finetune", "done")
_NEXT = {
    "stage1-gct": {"voting", "done"},
    "voting": {"stage2-finetune"},
    "stage2-finetune": {"done"},
    "done": set(),
}
VALID_FIELDS = ("epoch", "step", "stage", "ppl", "acc", "exact_match", "rho_shift")


class NonFiniteLoss(RuntimeError):
    pass


class StageError(RuntimeError):
    pass


@dataclass
class RunState:
    stage: str = "stage1-gct"
    epoch: int = 0
    step: int = 0
    stage_step: int = 0
    stage_epoch: int = 0
    rho: bool = False
    best: float = -1.0
    bad_epochs: int = 0
    forced_rho: bool = False

    def advance(self, stage):
        if stage not in _NEXT[self.stage]:
            raise StageError(f"illegal stage transition {self.stage} -> {stage}")
        self.stage = stage
        self.stage_step = 0
        self.stage_epoch = 0
        self.best = -1.0
        self.bad_epochs = 0


def evaluate(model, split, batch_size=256):
    """Task metrics over a whole split, in eval mode and off the tape."""
    was = model.training
    model.eval()
    nll = tokens = correct = exact = seqs = 0
    with nx.no_grad():
        for src, tgt_in, tgt_out in split.batches(batch_size):
            logits, _ = model.forward(src, tgt_in)
            m = task_metrics(logits.data, tgt_out, PAD)
            nll += m["nll_sum"]
            tokens += m["tokens"]
            correct += m["correct"]
            exact += m["exact"]
            seqs += m["sequences"]
    model.train(was)
    tokens = max(tokens, 1)
    return {"ppl": math.exp(nll / tokens), "acc": correct / tokens,
            "exact_match": exact / max(seqs, 1)}


def probe_compactness(model, batch, group_cfg, seed=0, restarts=5):
    """Fresh K-means grouping of every voted layer on one batch.

    Returns unweighted homogeneity and diversity terms, plus silhouette and
    Dunn index per layer (cosine distance on the primary FM kind).
    """
    src, tgt_in, _ = batch
    was = model.training
    model.eval()
    with nx.no_grad():
        _, fms = model.forward(src, tgt_in)
    model.train(was)
    rng = np.random.default_rng(seed)
    names = [fm.name for fm in fms]
    sel = [fm for fm in fms if layer_type(fm.name) in group_cfg.layer_types]
    primary = group_cfg.primary_kind
    kinds = [k for k, _ in group_cfg.weighted_kinds]
    pooled, cents, labels, sc, di = [], [], [], [], []
    with nx.no_grad():
        for fm in sel:
            p = {k: pool_feature_maps(fm, k).data.astype(np.float64) for k in kinds}
            lab, _ = discover_hidden_units(p[primary], group_cfg.n_groups, rng, restarts)
            C = group_cfg.n_groups
            cents.append({k: np.array([p[k][lab == j].mean(0) for j in range(C)]) for k in kinds})
            pooled.append(p)
            labels.append(lab)
            sc.append(silhouette(p[primary], lab))
            di.append(dunn_index(p[primary], lab))
    return {
        "layers": [fm.name for fm in sel],
        "homogeneity": intra_homogeneity(pooled, cents, labels, group_cfg.tau),
        "diversity": inter_diversity(cents, group_cfg.tau),
        "sc": sc,
        "di": di,
        "sc_final": sc[-1] if sc else float("nan"),
        "di_final": di[-1] if di else float("nan"),
        "labels": [lab.tolist() for lab in labels],
        "all_layers": names,
    }


class Trainer:
    """Owns model, optimizer, grouping state and run state for one run."""

    def __init__(self, cfg: RunConfig, data=None, out_dir=None, model=None):
        self.cfg = cfg
        self.data = data if data is not None else build_task(cfg.task)
        if cfg.model.vocab_size != self.data.vocab_size:
            cfg.model = dataclasses.replace(cfg.model, vocab_size=self.data.vocab_size)
        seed = cfg.train.seed
        self.model = model if model is not None else TransformerModel(cfg.model, seed=seed)
        names = [n for n, _ in self.model.attention_layers()]
        self.voted = [i for i, n in enumerate(names) if layer_type(n) in cfg.group.layer_types]
        self.grouping = GroupingState(cfg.group, [names[i] for i in self.voted], seed=seed)
        if cfg.group.variant == "categorical":
            self.grouping.build_classifiers(self._classifier_dims(), self.model.config.dtype)
        self.state = RunState()
        self.data_rng = np.random.default_rng([seed, 3])
        self.out_dir = out_dir
        self.report = None
        self.report_fields = None
        self.stage1_eval = None
        self._metrics = None
        self._build_optimizer()

    # ------------------------------------------------------------- plumbing
    def _classifier_dims(self):
        kind = self.cfg.group.primary_kind
        dk = self.model.config.head_dim
        if kind != "a":
            return [dk] * len(self.voted)
        src, tgt_in, _ = self.data.train.first_batch(1)
        widths = {"enc-self": None if src is None else src.shape[1],
                  "dec-self": tgt_in.shape[1],
                  "dec-cross": None if src is None else src.shape[1]}
        return [widths[layer_type(self.grouping.layer_names[i])] for i in range(len(self.voted))]

    def _build_optimizer(self):
        t = self.cfg.train
        params = list(self.model.named_parameters())
        if self.state.stage == "stage1-gct":
            params += self.grouping.named_parameters()
        self.opt = Adam(params, beta1=t.beta1, beta2=t.beta2, eps=t.adam_eps,
                        weight_decay=t.weight_decay, clip_norm=t.clip_norm)

    def _lr(self):
        t = self.cfg.train
        if self.state.stage == "stage2-finetune":
            sched = LrSchedule(t.finetune_warmup, t.finetune_lr)
        else:
            sched = LrSchedule(t.warmup_steps, t.peak_lr)
        return inverse_sqrt_lr(self.state.stage_step + 1, sched)

    def _path(self, name):
        return None if self.out_dir is None else os.path.join(self.out_dir, name)

    def _open_logs(self):
        if self.out_dir is None or self._metrics is not None:
            return
        os.makedirs(self.out_dir, exist_ok=True)
        self._metrics = MetricsLog(self._path("metrics.csv"))
        self._valid = MetricsLog(self._path("valid.csv"), VALID_FIELDS)
        cfg_path = self._path("config.ini")
        if not os.path.exists(cfg_path):
            atomic_write_text(cfg_path, dump_config(self.cfg))

    # ----------------------------------------------------------------- step
    def train_step(self, batch):
        cfg, g = self.cfg, self.cfg.group
        src, tgt_in, tgt_out = batch
        self.model.train()
        logits, fms = self.model.forward(src, tgt_in)
        loss_t = nx.cross_entropy(logits, tgt_out, cfg.train.label_smoothing, ignore_index=PAD)
        loss = loss_t
        loss_z = 0.0
        group_info = None
        if not math.isfinite(float(loss_t.data)):
            self._abort_nonfinite(float(loss_t.data))
        if self.state.stage == "stage1-gct":
            sel = [fms[i] for i in self.voted]
            weighted = [k for k, _ in g.weighted_kinds]
            pooled_t = [{k: pool_feature_maps(fm, k) for k in weighted} for fm in sel]
            with nx.no_grad():
                pooled_np = []
                for fm, pt in zip(sel, pooled_t):
                    pooled_np.append({k: (pt[k].data if k in pt else pool_feature_maps(fm, k).data)
                                      .astype(np.float64) for k in FM_KINDS})
            res = self.grouping.refresh(pooled_np)
            labels = [r[0] for r in res]
            cents = [r[1] for r in res]
            group_info = (pooled_np, cents, labels)
            if g.enabled:
                if g.variant == "continuous":
                    lz = gct_loss_continuous(pooled_t, cents, labels, g.alpha, g.beta, g.tau,
                                             g.n_groups, g.diversify_grad)
                else:
                    probs = [clf(p[g.primary_kind])
                             for clf, p in zip(self.grouping.classifiers, pooled_t)]
                    lz = gct_loss_categorical(probs, labels, g.alpha, g.beta, g.n_groups)
                loss = loss + lz
                loss_z = float(lz.data)
        value = float(loss.data)
        if not math.isfinite(value):
            self._abort_nonfinite(value)
        lr = self._lr()
        self.opt.zero_grad()
        loss.backward()
        self.opt.step(lr)
        if self.state.step % cfg.train.log_every == 0:
            self._log_row(float(loss_t.data), loss_z, logits.data, tgt_out, group_info)
        self.state.step += 1
        self.state.stage_step += 1
        return value

    def _log_row(self, loss_t, loss_z, logits, tgt_out, group_info):
        if self._metrics is None:
            return
        m = task_metrics(logits, tgt_out, PAD)
        row = {"step": self.state.step, "loss_task": loss_t, "loss_group": loss_z,
               "homogeneity": float("nan"), "diversity": float("nan"),
               "sc": float("nan"), "di": float("nan"), "ppl": m["ppl"], "acc": m["acc"]}
        if group_info is not None and group_info[0]:
            pooled, cents, labels = group_info
            tau = self.cfg.group.tau
            row["homogeneity"] = intra_homogeneity(pooled, cents, labels, tau)
            row["diversity"] = inter_diversity(cents, tau)
            prim = self.cfg.group.primary_kind
            row["sc"] = silhouette(pooled[-1][prim], labels[-1])
            row["di"] = dunn_index(pooled[-1][prim], labels[-1])
        self._metrics.append(row)

    def _abort_nonfinite(self, value):
        path = self._path("nonfinite.ckpt")
        if path:
            self.save(path)
        raise NonFiniteLoss(f"non-finite loss {value} at step {self.state.step} "
                            f"(stage {self.state.stage}); snapshot: {path}")

    # ---------------------------------------------------------------- epochs
    def _budget_left(self):
        cap = self.cfg.train.max_steps
        return cap == 0 or self.state.step < cap

    def run_epoch(self):
        self._open_logs()
        for batch in self.data.train.batches(self.cfg.train.batch_size, self.data_rng):
            if not self._budget_left():
                break
            self.train_step(batch)
        self.state.epoch += 1
        self.state.stage_epoch += 1
        val = evaluate(self.model, self.data.valid)
        shift = float("nan")
        if self.state.stage == "stage1-gct" and self.grouping.units and self.grouping.units[0].ema:
            self.grouping.snapshot()
            self.state.rho = self.grouping.converged()
            shift = self.grouping.epoch_shift()
        if val["acc"] > self.state.best + 1e-9:
            self.state.best = val["acc"]
            self.state.bad_epochs = 0
        else:
            self.state.bad_epochs += 1
        if self._metrics is not None:
            self._valid.append({"epoch": self.state.epoch, "step": self.state.step,
                                "stage": STAGES.index(self.state.stage), "rho_shift": shift, **val})
        log.info("epoch %d stage %s step %d valid acc %.4f ppl %.3f shift %.4g",
                 self.state.epoch, self.state.stage, self.state.step, val["acc"], val["ppl"], shift)
        return val

    def run_stage1(self):
        """Train with the group loss until the units converge or the budget runs out."""
        t = self.cfg.train
        if self.state.stage != "stage1-gct":
            return
        while self.state.stage_epoch < t.max_epochs and self._budget_left():
            self.run_epoch()
            self.checkpoint("last.ckpt")
            if t.v2s and self.state.rho:
                break
            if self.state.bad_epochs >= t.patience and not t.v2s:
                break
        self.stage1_eval = evaluate(self.model, self.data.valid)
        self.checkpoint("stage1.ckpt")

    def run_voting(self, force=False):
        """Voting epoch over the training split in fixed order; installs the mask."""
        if self.state.stage != "stage1-gct":
            raise StageError(f"voting needs stage1-gct, run is in {self.state.stage}")
        if not force and not self.state.rho and not self.grouping.converged():
            raise StageError("hidden units have not converged; voting refused")
        self.state.advance("voting")
        self.state.forced_rho = bool(force and not self.grouping.converged())
        self.report = run_voting_epoch(self.model, self.data.train.batches(self.cfg.train.batch_size),
                                       self.grouping, force=force)
        if self.out_dir:
            atomic_write_text(self._path("prune_report.txt"), self.report.to_text())
        self.state.advance("stage2-finetune")
        self._build_optimizer()
        return self.report

    def run_stage2(self, max_steps=None):
        """Task-loss-only finetuning of the masked model."""
        t = self.cfg.train
        if self.state.stage != "stage2-finetune":
            raise StageError(f"finetuning needs stage2-finetune, run is in {self.state.stage}")
        if self.model.head_mask is None:
            raise StageError("finetuning needs an installed head mask")
        self._open_logs()
        if max_steps is not None:
            stop = self.state.step + max_steps
            while self.state.step < stop:
                for batch in self.data.train.batches(t.batch_size, self.data_rng):
                    if self.state.step >= stop:
                        break
                    self.train_step(batch)
            return
        while self.state.stage_epoch < t.finetune_epochs and self._budget_left():
            self.run_epoch()
            self.checkpoint("last.ckpt")
            if self.state.bad_epochs >= t.patience:
                break

    def finish(self):
        if self.state.stage != "done":
            self.state.advance("done")
        summary = self.summary()
        if self.out_dir:
            self.checkpoint("final.ckpt")
            atomic_write_text(self._path("summary.json"), json.dumps(summary, indent=2, sort_keys=True))
        return summary

    def run(self):
        """Full pipeline: stage 1, then (if enabled and converged) voting and stage 2."""
        self._open_logs()
        self.run_stage1()
        if self.cfg.train.v2s and self.state.rho:
            self.run_voting()
            self.run_stage2()
        elif self.cfg.train.v2s:
            log.warning("hidden units did not converge within the stage-1 budget; no pruning")
        return self.finish()

    def summary(self):
        valid = evaluate(self.model, self.data.valid)
        test = evaluate(self.model, self.data.test)
        mask = self.model.head_mask
        heads = mask.sums() if mask is not None else [a.n_heads for _, a in self.model.attention_layers()]
        return {
            "stage": self.state.stage,
            "epochs": self.state.epoch,
            "steps": self.state.step,
            "rho_satisfied": bool(self.state.rho),
            "forced_rho": bool(self.state.forced_rho),
            "pruned": mask is not None,
            "heads_per_layer": heads,
            "params": count_params(self.model),
            "params_after_prune": self._params_after(),
            "flops": estimate_flops(self.model.config, heads_per_layer=heads),
            "stage1_valid": self.stage1_eval,
            "valid": valid,
            "test": test,
        }

    def _params_after(self):
        if self.report is not None:
            return self.report.params_after
        if self.report_fields is not None:
            return self.report_fields["params_after"]
        return None

    # ------------------------------------------------------------ persistence
    def checkpoint(self, name):
        path = self._path(name)
        if path:
            self.save(path)
        return path

    def save(self, path):
        tensors = [("params", n, p.data) for n, p in self.model.named_parameters()]
        for n in self.opt.params:
            tensors.append(("optimizer.m", n, self.opt.state.m[n]))
            tensors.append(("optimizer.v", n, self.opt.state.v[n]))
        tensors += [("grouping", n, p.data) for n, p in self.grouping.named_parameters()]
        mask = self.model.head_mask
        s = self.opt.state
        run = {
            "state": dataclasses.asdict(self.state),
            "optimizer": {"step": s.step, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps},
            "data_rng": self.data_rng.bit_generator.state,
            "dropout_rng": self.model.dropout_state(),
            "grouping": self.grouping.state_dict(),
            "stage1_eval": self.stage1_eval,
            "report": self._report_text(),
        }
        write_checkpoint(path, config_to_dict(self.cfg), tensors,
                         head_mask=None if mask is None else mask.to_list(), run=run)

    def _report_text(self):
        if self.report is not None:
            return self.report.to_text()
        return self.report_fields and self.report_fields.get("text")

    @classmethod
    def from_checkpoint(cls, path, out_dir=None, data=None, cfg=None):
        header, sections = read_checkpoint(path)
        cfg = cfg or config_from_dict(header["config"])
        tr = cls(cfg, data=data, out_dir=out_dir)
        tr.model.load_state_dict(sections["params"])
        if header["head_mask"] is not None:
            apply_head_mask(tr.model, HeadMask(header["head_mask"]))
        run = header["run"]
        tr.state = RunState(**run["state"])
        tr.data_rng.bit_generator.state = run["data_rng"]
        tr.model.set_dropout_state(run["dropout_rng"])
        tr.grouping.load_state_dict(run["grouping"])
        for n, p in tr.grouping.named_parameters():
            p.data = sections["grouping"][n].copy()
        tr.stage1_eval = run.get("stage1_eval")
        tr._build_optimizer()
        o = run["optimizer"]
        tr.opt.state.step = o["step"]
        for n in tr.opt.params:
            if n in sections.get("optimizer.m", {}):
                tr.opt.state.m[n] = sections["optimizer.m"][n].copy()
                tr.opt.state.v[n] = sections["optimizer.v"][n].copy()
        if run.get("report"):
            from ..v2s import parse_prune_report

            tr.report_fields = {**parse_prune_report(run["report"]), "text": run["report"]}
        return tr


def train(cfg: RunConfig, out_dir=None, data=None):
    """Run the whole pipeline and write artifacts under ``out_dir``."""
    out_dir = out_dir or cfg.output_dir
    trainer = Trainer(cfg, data=data, out_dir=out_dir)
    summary = trainer.run()
    return trainer, summary


def finetune(model, cfg: RunConfig, data=None, out_dir=None, max_steps=None):
    """Stage-2 training for a model that already carries a head mask."""
    if model.head_mask is None:
        raise StageError("finetuning needs an installed head mask")
    tr = Trainer(cfg, data=data, out_dir=out_dir, model=model)
    tr.state.stage = "stage2-finetune"
    tr._build_optimizer()
    if out_dir:
        tr._open_logs()
    if max_steps == 0:
        return model
    tr.run_stage2(max_steps=max_steps)
    return model
