"""Group compactness measures and efficiency accounting."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .grouping import EPS, _diversity_terms, _homogeneity_terms

NOT_APPLICABLE = float("nan")
INFINITE = float("inf")


# --------------------------------------------------------------------------
# Cluster validity
# --------------------------------------------------------------------------


def pairwise_distances(points, metric="cosine"):
    x = np.asarray(points, dtype=np.float64)
    if metric == "cosine":
        n = x / (np.linalg.norm(x, axis=1, keepdims=True) + EPS)
        d = 1.0 - n @ n.T
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, 2.0)
    if metric == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))
    raise ValueError(f"unknown metric {metric!r}")


def silhouette(points, labels, metric="cosine"):
    """Mean silhouette ``(b - a) / max(a, b)``; NaN when fewer than two clusters.

    Points alone in their cluster score 0, as do points with ``a = b = 0``.
    """
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) < 2:
        return NOT_APPLICABLE
    d = pairwise_distances(points, metric)
    scores = np.zeros(len(labels))
    for i, lab in enumerate(labels):
        own = labels == lab
        n_own = own.sum()
        if n_own <= 1:
            continue
        a = d[i, own].sum() / (n_own - 1)
        b = min(d[i, labels == g].mean() for g in groups if g != lab)
        top = max(a, b)
        scores[i] = 0.0 if top == 0 else (b - a) / top
    return float(scores.mean())


def dunn_index(points, labels, metric="cosine"):
    """Smallest between-cluster distance over largest within-cluster diameter.

    NaN for fewer than two clusters; ``inf`` when every cluster has zero diameter.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        return NOT_APPLICABLE
    d = pairwise_distances(points, metric)
    same = labels[:, None] == labels[None, :]
    separation = d[~same].min()
    diameter = d[same].max()
    if diameter == 0:
        return INFINITE
    return float(separation / diameter)


# --------------------------------------------------------------------------
# Group-loss terms, unweighted
# --------------------------------------------------------------------------


def intra_homogeneity(pooled, centroids, labels, tau=(1.0, 0.0, 0.0)):
    """First term of the metric-learning group loss with ``alpha = 1``.

    ``(1 / kn) * sum_{l,i} combined_phi(e_il; z_il)``; -1 when every head sits
    exactly on its group unit.
    """
    pooled = [_as_tensors(p) for p in pooled]
    n = len(pooled)
    k = next(iter(pooled[0].values())).shape[0]
    terms = _homogeneity_terms(pooled, centroids, labels, tau)
    return float(sum(float(t.data) for t in terms) / (k * n))


def inter_diversity(centroids, tau=(1.0, 0.0, 0.0)):
    """Second term of the metric-learning group loss with ``beta = 1``.

    ``-(1 / (C(C,2) n)) * sum_l sum_{j1<j2} phi(z^j1_l; z^j2_l)``: 0 for
    orthogonal units, +1 for identical ones, 0 when there is only one group.
    """
    n = len(centroids)
    first = next(iter(centroids[0].values()))
    C = len(first)
    if C < 2:
        return 0.0
    pooled = [_as_tensors(c) for c in centroids]
    labels = [np.arange(C)] * n
    terms = _diversity_terms(pooled, centroids, labels, tau, C, through="none")
    return -float(sum(float(t.data) for t in terms)) / (math.comb(C, 2) * n)


def _as_tensors(d):
    from .numerics import Tensor

    return {k: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
            for k, v in d.items()}


@dataclass
class CompactnessSnapshot:
    step: int
    sc: list = field(default_factory=list)
    di: list = field(default_factory=list)
    homogeneity: float = 0.0
    diversity: float = 0.0
    fm_kind: str = "v"


# --------------------------------------------------------------------------
# Parameter and FLOPs accounting
# --------------------------------------------------------------------------


def count_params(model, exclude_embeddings=True):
    """Sum of parameter extents; embedding tables (and a tied output head) excluded."""
    skip = set(model.embedding_parameter_names()) if exclude_embeddings else set()
    return int(sum(p.size for n, p in model.named_parameters() if n not in skip))


def attention_params(d_model, n_heads, head_dim, bias=True):
    inner = n_heads * head_dim
    w = 4 * d_model * inner
    return w + (3 * inner + d_model if bias else 0)


def closed_form_params(cfg, heads_per_layer=None):
    """Non-embedding parameter count from the configuration alone.

    ``heads_per_layer`` lists surviving heads per attention layer in canonical
    order (defaults to ``cfg.n_heads`` everywhere).
    """
    d, f, L = cfg.d_model, cfg.d_ff, cfg.n_layers
    dk = cfg.head_dim
    enc = cfg.arch == "encoder-decoder"
    n_attn = (3 * L) if enc else L
    heads = heads_per_layer or [cfg.n_heads] * n_attn
    if len(heads) != n_attn:
        raise ValueError(f"expected {n_attn} attention layers, got {len(heads)}")
    ffn = 2 * d * f + f + d
    ln = 2 * d
    total = sum(attention_params(d, h, dk) for h in heads)
    if enc:
        total += L * (ffn + 2 * ln) + ln  # encoder blocks + final norm
        total += L * (ffn + 3 * ln) + ln  # decoder blocks + final norm
    else:
        total += L * (ffn + 2 * ln) + ln
    if not cfg.tie_embeddings:
        total += d * cfg.vocab_size
    return total


@dataclass
class FlopsBreakdown:
    """FLOPs per block family; one multiply-accumulate counts as 2 FLOPs."""

    attn_proj: int = 0
    attn_scores: int = 0
    ffn: int = 0
    output_head: int = 0

    @property
    def total(self):
        return self.attn_proj + self.attn_scores + self.ffn + self.output_head


def estimate_flops(model_or_config, input_length=30, heads_per_layer=None, breakdown=False):
    """Analytic FLOPs for one forward pass with source and target of ``input_length``.

    Per attention layer with ``h`` heads of width ``dk`` on ``Tq`` queries and
    ``Tk`` keys: projections ``Tq*d*h*dk`` (Q) + ``2*Tk*d*h*dk`` (K, V) +
    ``Tq*h*dk*d`` (out); scores and weighted sum ``2*Tq*Tk*h*dk``. FFN:
    ``2*T*d*f``. Output head: ``T*d*V``. Norms, softmax and biases are ignored.
    """
    if hasattr(model_or_config, "attention_layers"):
        cfg = model_or_config.config
        heads_per_layer = [a.n_heads for _, a in model_or_config.attention_layers()]
    else:
        cfg = model_or_config
    d, f, dk, V, L = cfg.d_model, cfg.d_ff, cfg.head_dim, cfg.vocab_size, cfg.n_layers
    T = input_length
    enc = cfg.arch == "encoder-decoder"
    names = ([f"enc{i}.self" for i in range(L)] if enc else []) + [
        n for i in range(L) for n in ((f"dec{i}.self", f"dec{i}.cross") if enc else (f"dec{i}.self",))
    ]
    heads = heads_per_layer or [cfg.n_heads] * len(names)
    macs = FlopsBreakdown()
    for name, h in zip(names, heads):
        inner = h * dk
        macs.attn_proj += T * d * inner * 4
        macs.attn_scores += 2 * T * T * inner
    n_ffn = 2 * L if enc else L
    macs.ffn = n_ffn * 2 * T * d * f
    macs.output_head = T * d * V
    flops = FlopsBreakdown(2 * macs.attn_proj, 2 * macs.attn_scores, 2 * macs.ffn,
                           2 * macs.output_head)
    return flops if breakdown else flops.total


@dataclass
class EfficiencyReport:
    params: int
    flops: int
    heads_per_layer: list


def efficiency_report(model, input_length=30):
    return EfficiencyReport(
        count_params(model),
        estimate_flops(model, input_length),
        [a.n_heads for _, a in model.attention_layers()],
    )


# --------------------------------------------------------------------------
# Task metrics
# --------------------------------------------------------------------------


def task_metrics(logits, targets, pad_id=0):
    """Perplexity (unsmoothed), token accuracy and sequence exact match over non-pad tokens."""
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {targets.shape}")
    valid = targets != pad_id
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], -1)[..., 0]
    n = max(int(valid.sum()), 1)
    correct = (logits.argmax(-1) == targets) & valid
    seq_ok = (correct | ~valid).all(axis=-1)
    return {
        "ppl": float(math.exp(nll[valid].sum() / n)),
        "acc": float(correct.sum() / n),
        "exact_match": float(seq_ok.mean()),
        "nll_sum": float(nll[valid].sum()),
        "tokens": int(valid.sum()),
        "correct": int(correct.sum()),
        "sequences": int(targets.shape[0]),
        "exact": int(seq_ok.sum()),
    }


# --------------------------------------------------------------------------
# Metrics log
# --------------------------------------------------------------------------

METRIC_FIELDS = ("step", "loss_task", "loss_group", "homogeneity", "diversity", "sc", "di",
                 "ppl", "acc")


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsLog:
    """Append-only CSV with a fixed header."""

    def __init__(self, path, fields=METRIC_FIELDS):
        self.path = path
        self.fields = tuple(fields)
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as fh:
                fh.write(",".join(self.fields) + "\n")

    def append(self, row):
        missing = set(self.fields) - set(row)
        if missing:
            raise KeyError(f"metrics row missing {sorted(missing)}")
        with open(self.path, "a", newline="") as fh:
            fh.write(",".join(_fmt(row[f]) for f in self.fields) + "\n")
            fh.flush()


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "step" else float(v)) for k, v in r.items()})
    return out


def metrics_to_csv(rows, fields=METRIC_FIELDS):
    buf = io.StringIO()
    buf.write(",".join(fields) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(r[f]) for f in fields) + "\n")
    return buf.getvalue()
