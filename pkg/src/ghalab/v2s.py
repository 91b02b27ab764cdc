"""Voting-to-stay: pick one pillar head per group from a frozen model's votes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .checkpoint import parameter_hash
from .grouping import FM_KINDS, layer_type, pattern_score, pool_feature_maps
from .metrics import closed_form_params, count_params, estimate_flops
from .model import HeadMask, apply_head_mask


class VotingError(RuntimeError):
    pass


@dataclass
class VoteVector:
    layer: int
    kind: str
    batch: int
    bits: np.ndarray


@dataclass
class VoteLedger:
    """All vote vectors of one attention layer, under one frozen assignment."""

    layer: int
    labels: np.ndarray
    votes: list = field(default_factory=list)
    eta_sums: dict = field(default_factory=dict)  # kind -> (k,) summed scores
    batches: int = 0

    def add(self, vectors, etas=None):
        self.votes.extend(vectors)
        if etas:
            for kind, eta in etas.items():
                prev = self.eta_sums.get(kind)
                self.eta_sums[kind] = eta.copy() if prev is None else prev + eta

    def counts(self):
        k = len(self.labels)
        c = np.zeros(k, dtype=np.int64)
        for v in self.votes:
            c += v.bits
        return c

    def score_sums(self):
        k = len(self.labels)
        total = np.zeros(k)
        for eta in self.eta_sums.values():
            total = total + eta
        return total

    @property
    def complete(self):
        return self.batches > 0 and len(self.votes) == 3 * self.batches


def _check_groups(labels, n_groups):
    labels = np.asarray(labels)
    present = set(labels.tolist())
    missing = [j for j in range(n_groups) if j not in present]
    if missing:
        raise VotingError(f"assignment has no head in group(s) {missing}")
    return labels


def _argmax_per_group(scores, labels, n_groups):
    """0/1 vector selecting the top-scoring head of each group; ties go to the lowest index."""
    bits = np.zeros(len(labels), dtype=np.int8)
    for j in range(n_groups):
        members = np.flatnonzero(labels == j)
        best = members[int(np.argmax(np.asarray(scores)[members]))]
        bits[best] = 1
    return bits


def batch_votes(etas, labels, n_groups, layer=0, batch=0):
    """One vote vector per FM kind: the max-eta head of every group gets a 1."""
    labels = _check_groups(labels, n_groups)
    return [VoteVector(layer, kind, batch, _argmax_per_group(etas[kind], labels, n_groups))
            for kind in FM_KINDS if kind in etas]


def vote(ledger, n_groups, require_complete=True):
    """Tally 0/1 votes; the head with the most 1s in each group stays."""
    if require_complete and not ledger.complete:
        raise VotingError(f"ledger for layer {ledger.layer} is incomplete: "
                          f"{len(ledger.votes)} votes for {ledger.batches} batches")
    if not ledger.votes:
        raise VotingError(f"ledger for layer {ledger.layer} is empty")
    labels = _check_groups(ledger.labels, n_groups)
    return _argmax_per_group(ledger.counts(), labels, n_groups)


def score_sum_vote(ledger, n_groups, require_complete=True):
    """Alternative tally: the head with the largest summed pattern score stays."""
    if require_complete and not ledger.complete:
        raise VotingError(f"ledger for layer {ledger.layer} is incomplete")
    if not ledger.eta_sums:
        raise VotingError(f"ledger for layer {ledger.layer} has no accumulated scores")
    labels = _check_groups(ledger.labels, n_groups)
    return _argmax_per_group(ledger.score_sums(), labels, n_groups)


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class PruneReport:
    mask: HeadMask
    layer_names: list
    labels: list
    vote_counts: list
    score_sums: list
    batches: int
    n_groups: int
    vote_mode: str
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    hash_before: str = ""
    hash_after: str = ""

    @property
    def survivors(self):
        return [np.flatnonzero(m).tolist() for m in self.mask.layers]

    def to_text(self):
        lines = [
            "# prune report",
            "format_version: 1",
            f"n_groups: {self.n_groups}",
            f"vote_mode: {self.vote_mode}",
            f"batches: {self.batches}",
            f"layers: {len(self.layer_names)}",
            f"params_before: {self.params_before}",
            f"params_after: {self.params_after}",
            f"params_reduction: {1 - self.params_after / max(self.params_before, 1):.6f}",
            f"flops_before: {self.flops_before}",
            f"flops_after: {self.flops_after}",
            f"param_hash_before: {self.hash_before}",
            f"param_hash_after: {self.hash_after}",
            f"mask: {json.dumps(self.mask.to_list())}",
            "",
        ]
        for i, name in enumerate(self.layer_names):
            lines.append(f"[layer {i} {name}]")
            lines.append(f"survivors: {json.dumps(self.survivors[i])}")
            lines.append("head\tgroup\tvotes\tscore_sum\tkeep")
            for h in range(len(self.labels[i])):
                lines.append(f"{h}\t{int(self.labels[i][h])}\t{int(self.vote_counts[i][h])}\t"
                             f"{float(self.score_sums[i][h]):.6f}\t{int(self.mask.layers[i][h])}")
            lines.append("")
        return "\n".join(lines)


def parse_prune_report(text):
    """Parse :meth:`PruneReport.to_text` output into plain dicts."""
    head, layers, cur = {}, [], None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("[layer "):
            _, idx, name = line.strip("[]").split(" ")
            cur = {"index": int(idx), "name": name, "heads": []}
            layers.append(cur)
        elif cur is None:
            key, _, val = line.partition(": ")
            head[key] = val
        elif line.startswith("survivors: "):
            cur["survivors"] = json.loads(line.split(": ", 1)[1])
        elif line.startswith("head\t"):
            continue
        else:
            h, g, v, s, k = line.split("\t")
            cur["heads"].append({"head": int(h), "group": int(g), "votes": int(v),
                                 "score_sum": float(s), "keep": int(k)})
    for key in ("n_groups", "batches", "layers", "params_before", "params_after",
                "flops_before", "flops_after", "format_version"):
        if key in head:
            head[key] = int(head[key])
    if "mask" in head:
        head["mask"] = json.loads(head["mask"])
    head["layer_tables"] = layers
    return head


# --------------------------------------------------------------------------
# Voting epoch
# --------------------------------------------------------------------------


def _layer_etas(fm, unit_ema, labels, classifier=None, primary=None):
    """Pattern scores of every head for each FM kind on one batch."""
    etas = {}
    for kind in FM_KINDS:
        e = pool_feature_maps(fm, kind)
        if classifier is not None and kind == primary:
            probs = classifier(e).data.astype(np.float64)
            etas[kind] = pattern_score(None, prob=probs[np.arange(len(labels)), labels])
        else:
            z = unit_ema[kind][labels]
            etas[kind] = pattern_score(e.data.astype(np.float64), z)
    return etas


def run_voting_epoch(model, batches, grouping, force=False, vote_mode=None):
    """Freeze ``model``, collect votes over every batch, install and report the mask.

    ``batches`` yields ``(src, tgt_in, tgt_out)``. Only attention layers whose
    type is enabled in the grouping config are voted on; the others keep all
    heads.
    """
    cfg = grouping.config
    C = cfg.n_groups
    mode = vote_mode or cfg.vote_mode
    if model.head_mask is not None:
        raise VotingError("a head mask is already installed; voting runs once")
    if not force and not grouping.converged():
        raise VotingError(f"hidden units have not converged (epoch shift "
                          f"{grouping.epoch_shift():.4g} >= {cfg.rho_eps})")
    layers = model.attention_layers()
    voted = [i for i, (name, _) in enumerate(layers) if layer_type(name) in cfg.layer_types]
    if len(voted) != len(grouping.units):
        raise VotingError(f"grouping tracks {len(grouping.units)} layers, model votes on {len(voted)}")
    for unit in grouping.units:
        if not unit.ema:
            raise VotingError(f"layer {unit.name} has no hidden units yet")

    hash_before = parameter_hash(model)
    was_training = model.training
    model.eval()
    ledgers = None
    primary = cfg.primary_kind
    classifiers = grouping.classifiers if cfg.variant == "categorical" else None
    n_batches = 0
    with nx.no_grad():
        for b, (src, tgt_in, _) in enumerate(batches):
            _, fms = model.forward(src, tgt_in)
            fms = [fms[i] for i in voted]
            if ledgers is None:
                pooled = [pool_feature_maps(fm, primary).data for fm in fms]
                frozen = grouping.assign(pooled)
                ledgers = [VoteLedger(i, lab) for i, lab in enumerate(frozen)]
            for li, (fm, unit, ledger) in enumerate(zip(fms, grouping.units, ledgers)):
                clf = classifiers[li] if classifiers else None
                etas = _layer_etas(fm, unit.ema, ledger.labels, clf, primary)
                ledger.add(batch_votes(etas, ledger.labels, C, li, b), etas)
                ledger.batches += 1
            n_batches += 1
    model.train(was_training)
    if not ledgers:
        raise VotingError("voting epoch saw no batches")

    tally = score_sum_vote if mode == "score-sum" else vote
    full = [np.ones(a.n_heads, np.int8) for _, a in layers]
    counts = [np.zeros(a.n_heads, np.int64) for _, a in layers]
    sums = [np.zeros(a.n_heads) for _, a in layers]
    labels = [np.zeros(a.n_heads, np.int64) for _, a in layers]
    for li, ledger in zip(voted, ledgers):
        full[li] = tally(ledger, C)
        counts[li] = ledger.counts()
        sums[li] = ledger.score_sums()
        labels[li] = ledger.labels
    mask = HeadMask(full)

    params_before = count_params(model)
    flops_before = estimate_flops(model)
    heads_after = [int(m.sum()) for m in mask.layers]
    params_after = closed_form_params(model.config, heads_after)
    params_after += params_before - closed_form_params(
        model.config, [a.n_heads for _, a in layers])
    flops_after = estimate_flops(model.config, heads_per_layer=heads_after)

    apply_head_mask(model, mask)
    hash_after = parameter_hash(model)
    if hash_after != hash_before:
        raise VotingError("parameters changed during the voting epoch")
    return PruneReport(
        mask=mask,
        layer_names=[n for n, _ in layers],
        labels=labels,
        vote_counts=counts,
        score_sums=sums,
        batches=n_batches,
        n_groups=C,
        vote_mode=mode,
        params_before=params_before,
        params_after=params_after,
        flops_before=flops_before,
        flops_after=flops_after,
        hash_before=hash_before,
        hash_after=hash_after,
    )


def finetune_after_prune(model, config, data=None, out_dir=None, steps=None):
    """Stage-2 training of a masked model with the task loss only."""
    from .harness.train import finetune

    return finetune(model, config, data=data, out_dir=out_dir, max_steps=steps)
