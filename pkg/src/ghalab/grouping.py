"""Hidden-unit discovery over attention heads and the group-constrained loss.

Each attention layer's heads are summarised by pooled feature-map vectors
(one per head), clustered with K-means into ``C`` groups, and the group
centroids act as per-batch self-supervision targets. Group identities are kept
stable across batches by matching new centroids to an exponential moving
average before updating it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .numerics import ShapeError, Tensor

FM_KINDS = ("v", "a", "o")
EPS = 1e-8


class GroupConfigError(ValueError):
    pass


@dataclass
class GroupConfig:
    n_groups: int = 2
    alpha: float = 0.5
    beta: float = 0.5
    tau: tuple = (1.0, 0.0, 0.0)
    variant: str = "continuous"
    rho_eps: float = 0.01
    ema_decay: float = 0.9
    refresh_every: int = 1
    kmeans_restarts: int = 3
    diversify_grad: str = "members"
    vote_mode: str = "zero-one"
    layer_types: tuple = ("enc-self", "dec-self", "dec-cross")

    def __post_init__(self):
        self.tau = tuple(float(t) for t in self.tau)

    def validate(self, n_heads=None):
        if self.n_groups < 1:
            raise GroupConfigError("group.n_groups: must be >= 1")
        if n_heads is not None and self.n_groups > n_heads:
            raise GroupConfigError(f"group.n_groups: {self.n_groups} > number of heads {n_heads}")
        if self.alpha < 0 or self.beta < 0:
            raise GroupConfigError("group.alpha/group.beta: must be >= 0")
        if len(self.tau) != 3 or any(t < 0 for t in self.tau) or sum(self.tau) <= 0:
            raise GroupConfigError("group.tau: need three non-negative weights, not all zero")
        if self.variant not in ("continuous", "categorical"):
            raise GroupConfigError(f"group.variant: {self.variant!r} not in (continuous, categorical)")
        if self.diversify_grad not in ("members", "none"):
            raise GroupConfigError(f"group.diversify_grad: {self.diversify_grad!r} not in (members, none)")
        if self.vote_mode not in ("zero-one", "score-sum"):
            raise GroupConfigError(f"group.vote_mode: {self.vote_mode!r} not in (zero-one, score-sum)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise GroupConfigError("group.ema_decay: must be in [0, 1)")
        if self.refresh_every < 1:
            raise GroupConfigError("group.refresh_every: must be >= 1")
        bad = set(self.layer_types) - {"enc-self", "dec-self", "dec-cross"}
        if bad:
            raise GroupConfigError(f"group.layer_types: unknown entries {sorted(bad)}")

    @property
    def primary_kind(self):
        """FM kind that drives clustering: the one with the largest tau weight."""
        return FM_KINDS[int(np.argmax(self.tau))]

    @property
    def weighted_kinds(self):
        return [(k, t) for k, t in zip(FM_KINDS, self.tau) if t > 0]

    @property
    def enabled(self):
        return self.alpha > 0 or self.beta > 0


def layer_type(name):
    stack, kind = name.split(".")
    return ("enc-" if stack.startswith("enc") else "dec-") + kind


# --------------------------------------------------------------------------
# Pooling
# --------------------------------------------------------------------------


def _l2_normalize(x):
    norm = nx.sqrt((x * x).sum(axis=-1, keepdims=True) + EPS * EPS)
    return x / norm


def pool_feature_maps(fm, kind):
    """Collapse one layer's FM of ``kind`` into ``(k, d)`` unit vectors, one per head.

    Value and head-output maps are averaged over batch and sequence; attention
    maps over batch and query positions (leaving one weight per key position).
    Pad positions are excluded from the averages. Accepts a
    :class:`~ghalab.model.LayerFeatureMaps`; result stays on the tape.
    """
    x = fm.get(kind)
    B = x.shape[0]
    if B == 0:
        raise ValueError("cannot pool an empty batch")
    if kind == "v":
        w = fm.key_valid
    else:
        w = fm.query_valid
    w = w.astype(x.dtype)
    count = w.sum()
    if count == 0:
        raise ValueError("cannot pool a batch with no valid positions")
    weights = (w / count)[:, None, :, None]  # (B, 1, T, 1)
    pooled = (x * weights).sum(axis=(0, 2))  # (k, d)
    return _l2_normalize(pooled)


def pool_array(x, valid=None):
    """Plain-numpy pooling for a ``(B, h, T, d)`` array (used by tests and dumps)."""
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("cannot pool an empty batch")
    if valid is None:
        p = x.mean(axis=(0, 2))
    else:
        w = valid.astype(x.dtype) / valid.sum()
        p = np.einsum("bhtd,bt->hd", x, w)
    return p / np.sqrt((p * p).sum(-1, keepdims=True) + EPS * EPS)


# --------------------------------------------------------------------------
# K-means (HUDS)
# --------------------------------------------------------------------------


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x, C, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, C):
        d2 = _sq_dists(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
    return np.array(centers, dtype=np.float64)


def _repair_empty(x, labels, C):
    """Give every empty cluster the member of the largest cluster farthest from its mean."""
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=C)
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return labels
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        mu = x[members].mean(axis=0)
        far = members[int(np.argmax(((x[members] - mu) ** 2).sum(-1)))]
        labels[far] = empty[0]


def lloyd_step(x, labels, C):
    centroids = np.array([x[labels == j].mean(axis=0) for j in range(C)])
    return np.argmin(_sq_dists(x, centroids), axis=1), centroids


def kmeans_cost(x, labels, C):
    return float(sum(((x[labels == j] - x[labels == j].mean(axis=0)) ** 2).sum()
                     for j in range(C) if np.any(labels == j)))


def _hartigan(x, labels, C):
    """Single-point transfers that lower the cost; stops at a Hartigan-stable partition.

    A Hartigan-stable partition is also a Lloyd fixpoint, and many Lloyd
    fixpoints are not Hartigan-stable, so this only ever escapes poor optima.
    """
    labels = labels.copy()
    moved = True
    while moved:
        moved = False
        for i in range(len(x)):
            a = labels[i]
            counts = np.bincount(labels, minlength=C)
            if counts[a] == 1:
                continue
            mu = np.array([x[labels == j].mean(axis=0) for j in range(C)])
            d2 = ((x[i] - mu) ** 2).sum(-1)
            remove = counts[a] / (counts[a] - 1) * d2[a]
            add = counts / (counts + 1) * d2
            add[a] = np.inf
            b = int(np.argmin(add))
            if add[b] < remove - 1e-12:
                labels[i] = b
                moved = True
    return labels


def _lloyd(x, C, rng, max_iter=100):
    centers = _kmeanspp(x, C, rng)
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    labels = _repair_empty(x, labels, C)
    for _ in range(max_iter):
        new, _ = lloyd_step(x, labels, C)
        new = _repair_empty(x, new, C)
        if np.array_equal(new, labels):
            break
        labels = new
    labels = _hartigan(x, labels, C)
    centroids = np.array([x[labels == j].mean(axis=0) for j in range(C)])
    return labels, centroids


def discover_hidden_units(points, n_groups, rng=None, restarts=3):
    """K-means the per-head vectors into ``n_groups`` groups.

    Lloyd iterations from k-means++ seeds, polished by single-point transfers,
    best of ``restarts`` runs. Returns ``(labels, centroids)`` with labels in
    ``0..C-1`` and every group nonempty.
    """
    x = np.asarray(points, dtype=np.float64)
    k = len(x)
    if n_groups > k:
        raise GroupConfigError(f"cannot form {n_groups} groups from {k} heads")
    if n_groups < 1:
        raise GroupConfigError("n_groups must be >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("pooled vectors must be finite")
    rng = np.random.default_rng(rng)
    if n_groups == 1:
        return np.zeros(k, dtype=np.int64), x.mean(axis=0, keepdims=True)
    if n_groups == k:
        return np.arange(k), x.copy()
    best = None
    for _ in range(max(1, restarts)):
        labels, cents = _lloyd(x, n_groups, rng)
        cost = kmeans_cost(x, labels, n_groups)
        if best is None or cost < best[0] - 1e-12:
            best = (cost, labels, cents)
    return best[1], best[2]


# --------------------------------------------------------------------------
# Cross-batch identity
# --------------------------------------------------------------------------


def _cosine_matrix(a, b):
    an = a / (np.linalg.norm(a, axis=1, keepdims=True) + EPS)
    bn = b / (np.linalg.norm(b, axis=1, keepdims=True) + EPS)
    return an @ bn.T


@lru_cache(maxsize=None)
def _perms(C):
    return np.array(list(itertools.permutations(range(C))), dtype=np.int64)


def match_groups(new, ema):
    """Permutation ``perm`` with ``perm[j]`` = EMA slot for new centroid ``j``.

    Maximises total cosine similarity: exhaustive up to 8 groups, Hungarian
    assignment beyond.
    """
    new = np.asarray(new, dtype=np.float64)
    ema = np.asarray(ema, dtype=np.float64)
    if new.shape != ema.shape:
        raise ShapeError(f"centroid sets differ in shape: {new.shape} vs {ema.shape}")
    C = len(new)
    sim = _cosine_matrix(new, ema)
    if C <= 8:
        perms = _perms(C)
        totals = sim[np.arange(C)[None, :], perms].sum(axis=1)
        return perms[int(np.argmax(totals))].copy()
    rows, cols = linear_sum_assignment(-sim)
    perm = np.empty(C, dtype=np.int64)
    perm[rows] = cols
    return perm


# --------------------------------------------------------------------------
# Similarity and losses
# --------------------------------------------------------------------------


def phi(x, y):
    """Negative cosine similarity, ``-<x, y> / (|x| |y|)``.

    Works on numpy arrays or tape tensors; the last axis is the vector axis.
    """
    if isinstance(x, Tensor) or isinstance(y, Tensor):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=y.dtype))
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.dtype))
        if x.shape[-1] != y.shape[-1]:
            raise ShapeError(f"phi dimension mismatch: {x.shape} vs {y.shape}")
        num = (x * y).sum(axis=-1)
        den = nx.sqrt((x * x).sum(axis=-1) * (y * y).sum(axis=-1) + EPS ** 4)
        return -(num / den)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"phi dimension mismatch: {x.shape} vs {y.shape}")
    num = (x * y).sum(-1)
    den = np.maximum(np.sqrt((x * x).sum(-1) * (y * y).sum(-1)), EPS ** 2)
    return -(num / den)


def combined_phi(pooled, centroids, tau):
    """``sum_f tau_f * phi(e_f; z_f)`` over the FM kinds with nonzero weight.

    ``pooled`` and ``centroids`` map FM kind -> vector(s); entries for kinds
    with zero weight may be absent.
    """
    total = None
    for kind, t in zip(FM_KINDS, tau):
        if t == 0:
            continue
        if kind not in pooled or kind not in centroids:
            raise ShapeError(f"tau selects FM {kind!r} but no vector was given for it")
        term = phi(pooled[kind], centroids[kind]) * t
        total = term if total is None else total + term
    return total


def _group_means(e, labels, C):
    """Differentiable ``(C, d)`` means of the rows of ``e`` grouped by ``labels``."""
    onehot = np.zeros((C, len(labels)), dtype=e.dtype)
    onehot[labels, np.arange(len(labels))] = 1.0
    onehot /= onehot.sum(axis=1, keepdims=True)
    return nx.matmul(Tensor(onehot), e)


def _homogeneity_terms(pooled, centroids, labels, tau):
    """Per-layer ``sum_i combined_phi(e_i; z_{label_i})`` (on the tape)."""
    out = []
    for layer_pooled, layer_cent, lab in zip(pooled, centroids, labels):
        targets = {k: np.asarray(layer_cent[k])[lab] for k, t in zip(FM_KINDS, tau) if t > 0}
        out.append(combined_phi(layer_pooled, targets, tau).sum())
    return out


def _diversity_terms(pooled, centroids, labels, tau, C, through="members"):
    """Per-layer ``sum_{j1<j2} sum_f tau_f phi(z_f^j1; z_f^j2)``."""
    out = []
    pairs = list(itertools.combinations(range(C), 2))
    if not pairs:
        return out
    i1 = np.array([p[0] for p in pairs])
    i2 = np.array([p[1] for p in pairs])
    for layer_pooled, layer_cent, lab in zip(pooled, centroids, labels):
        total = None
        for kind, t in zip(FM_KINDS, tau):
            if t == 0:
                continue
            if through == "members":
                z = _group_means(layer_pooled[kind], lab, C)
            else:
                z = Tensor(np.asarray(layer_cent[kind], dtype=layer_pooled[kind].dtype))
            term = phi(z[i1], z[i2]).sum() * t
            total = term if total is None else total + term
        out.append(total)
    return out


def gct_loss_continuous(pooled, centroids, labels, alpha, beta, tau, n_groups,
                        diversify_grad="members"):
    """Metric-learning group loss over ``n`` layers.

    ``(alpha / kn) * sum_{l,i} combined_phi(e_il; z_il)
    - (beta / (C(C,2) n)) * sum_l sum_{j1<j2} phi(z^j1_l; z^j2_l)``

    ``pooled[l][kind]`` is a ``(k, d)`` tape tensor, ``centroids[l][kind]`` a
    ``(C, d)`` array and ``labels[l]`` a length-``k`` int array. Centroids are
    constants for the homogenisation pull. With ``diversify_grad="members"`` the
    separation term is evaluated on differentiable group means of the current
    pooled vectors (numerically the K-means centroids), so it can push groups
    apart; ``"none"`` treats it as a constant.
    """
    n = len(pooled)
    if n == 0:
        return Tensor(np.zeros((), dtype=np.float32))
    dtype = next(iter(pooled[0].values())).dtype
    loss = Tensor(np.zeros((), dtype=dtype))
    if alpha:
        k = next(iter(pooled[0].values())).shape[0]
        homo = _homogeneity_terms(pooled, centroids, labels, tau)
        loss = loss + nx.stack(homo).sum() * (alpha / (k * n))
    if beta and n_groups >= 2:
        div = _diversity_terms(pooled, centroids, labels, tau, n_groups, diversify_grad)
        loss = loss - nx.stack(div).sum() * (beta / (math.comb(n_groups, 2) * n))
    return loss


def gct_loss_categorical(probs, labels, alpha, beta, n_groups, clamp=1e-7):
    """Classification group loss.

    ``probs[l]`` is a ``(k, C)`` tape tensor of per-head class probabilities.
    ``-(alpha/kn) sum log p(own) + (beta/((C-1)kn)) sum_i sum_{j != own} log p(j)``.
    """
    n = len(probs)
    if n == 0:
        return Tensor(np.zeros((), dtype=np.float32))
    dtype = probs[0].dtype
    loss = Tensor(np.zeros((), dtype=dtype))
    k = probs[0].shape[0]
    own_terms, other_terms = [], []
    for p, lab in zip(probs, labels):
        if p.shape != (k, n_groups):
            raise ShapeError(f"classifier output {p.shape} != ({k}, {n_groups})")
        if np.abs(p.data.sum(axis=-1) - 1.0).max() > 1e-5:
            raise ValueError("classifier probabilities must sum to 1 within 1e-5")
        logp = nx.log(nx.clip(p, clamp, 1.0))
        own = np.zeros((k, n_groups), dtype=dtype)
        own[np.arange(k), lab] = 1.0
        own_terms.append((logp * own).sum())
        other_terms.append((logp * (1.0 - own)).sum())
    if alpha:
        loss = loss - nx.stack(own_terms).sum() * (alpha / (k * n))
    if beta and n_groups >= 2:
        loss = loss + nx.stack(other_terms).sum() * (beta / ((n_groups - 1) * k * n))
    return loss


class GroupClassifier:
    """Per-layer linear map from a pooled FM vector to ``C`` group probabilities."""

    def __init__(self, d_in, n_groups, rng, dtype=np.float32):
        bound = math.sqrt(6.0 / (d_in + n_groups))
        self.weight = Tensor(rng.uniform(-bound, bound, (d_in, n_groups)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_groups, dtype=dtype), requires_grad=True)

    def __call__(self, e):
        return nx.softmax(nx.linear(e, self.weight, self.bias), axis=-1)


def pattern_score(e, z=None, prob=None):
    """How explicitly head vectors ``e`` show their group pattern.

    Continuous: cosine similarity to the group unit ``z`` (``-phi``).
    Categorical: the classifier's probability for the head's own group.
    """
    if prob is not None:
        return np.asarray(prob, dtype=np.float64)
    return -phi(e, z)


def centroid_shift(prev, cur):
    """Mean cosine distance between matched centroid rows."""
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    return float(np.mean(1.0 + phi(prev, cur)))


def convergence_check(history, eps):
    """True when every layer's end-of-epoch centroids moved less than ``eps``.

    ``history`` is a list of epoch snapshots; each snapshot is a list (one per
    layer) of ``(C, d)`` centroid arrays. Needs at least two snapshots.
    """
    if len(history) < 2:
        return False
    prev, cur = history[-2], history[-1]
    return all(centroid_shift(p, c) < eps for p, c in zip(prev, cur))


# --------------------------------------------------------------------------
# Stateful tracker used by the training loop
# --------------------------------------------------------------------------


@dataclass
class HiddenUnits:
    """EMA-stabilised group units of one attention layer, for every FM kind."""

    name: str
    ema: dict = field(default_factory=dict)  # kind -> (C, d)
    labels: np.ndarray | None = None
    last_shift: float = 0.0
    updates: int = 0


class GroupingState:
    """Per-layer hidden units, group assignments and epoch snapshots."""

    def __init__(self, config: GroupConfig, layer_names, seed=0):
        self.config = config
        self.layer_names = list(layer_names)
        self.units = [HiddenUnits(n) for n in self.layer_names]
        self.history = []
        self.rng = np.random.default_rng([seed, 7])
        self.step = 0
        self.classifiers = None

    # -- categorical classifier plumbing
    def build_classifiers(self, dims, dtype=np.float32):
        rng = np.random.default_rng([int(self.rng.integers(2**31)), 11])
        self.classifiers = [GroupClassifier(d, self.config.n_groups, rng, dtype) for d in dims]

    def named_parameters(self):
        if not self.classifiers:
            return []
        out = []
        for i, c in enumerate(self.classifiers):
            out.append((f"classifier.{i}.weight", c.weight))
            out.append((f"classifier.{i}.bias", c.bias))
        return out

    # -- HUDS refresh
    def refresh(self, pooled_np):
        """Cluster this batch's pooled vectors and fold them into the EMA units.

        ``pooled_np[l][kind]`` is a ``(k, d)`` array for every FM kind. Returns
        per-layer ``(labels, centroids)``, where ``centroids[kind]`` are this
        batch's group means in the stable (EMA) labelling.
        """
        cfg = self.config
        C = cfg.n_groups
        primary = cfg.primary_kind
        out = []
        for unit, layer in zip(self.units, pooled_np):
            refresh = unit.labels is None or self.step % cfg.refresh_every == 0
            if refresh:
                labels, _ = discover_hidden_units(layer[primary], C, self.rng,
                                                  restarts=cfg.kmeans_restarts)
            else:
                labels = unit.labels
            cents = {k: _np_group_means(layer[k], labels, C) for k in layer}
            if unit.ema and refresh:
                perm = match_groups(cents[primary], unit.ema[primary])
                labels = perm[labels]
                cents = {k: _np_group_means(layer[k], labels, C) for k in layer}
            if not unit.ema:
                unit.ema = {k: v.copy() for k, v in cents.items()}
                unit.last_shift = 0.0
            else:
                d = cfg.ema_decay
                old = unit.ema[primary]
                for k, v in cents.items():
                    if k in unit.ema and unit.ema[k].shape == v.shape:
                        unit.ema[k] = d * unit.ema[k] + (1 - d) * v
                    else:
                        unit.ema[k] = v.copy()
                unit.last_shift = centroid_shift(old, unit.ema[primary])
            unit.labels = labels
            unit.updates += 1
            out.append((labels, cents))
        self.step += 1
        return out

    def snapshot(self):
        """Record end-of-epoch EMA centroids of the primary FM kind."""
        primary = self.config.primary_kind
        self.history.append([u.ema[primary].copy() for u in self.units if u.ema])

    def converged(self):
        return convergence_check(self.history, self.config.rho_eps)

    def epoch_shift(self):
        if len(self.history) < 2:
            return float("nan")
        return max(centroid_shift(p, c) for p, c in zip(self.history[-2], self.history[-1]))

    def assign(self, pooled_primary):
        """Nearest-EMA-unit labels for each layer, repaired so no group is empty."""
        C = self.config.n_groups
        primary = self.config.primary_kind
        out = []
        for unit, e in zip(self.units, pooled_primary):
            sim = _cosine_matrix(np.asarray(e, dtype=np.float64), unit.ema[primary])
            labels = np.argmax(sim, axis=1)
            while len(e) >= C:
                counts = np.bincount(labels, minlength=C)
                empty = np.flatnonzero(counts == 0)
                if len(empty) == 0:
                    break
                j = empty[0]
                donors = [i for i in range(len(labels)) if counts[labels[i]] > 1]
                pick = max(donors, key=lambda i: (sim[i, j], -i))
                labels[pick] = j
            out.append(labels)
        return out

    # -- persistence
    def state_dict(self):
        return {
            "step": self.step,
            "history": [[c.tolist() for c in snap] for snap in self.history],
            "units": [
                {
                    "name": u.name,
                    "ema": {k: v.tolist() for k, v in u.ema.items()},
                    "labels": None if u.labels is None else u.labels.tolist(),
                    "last_shift": u.last_shift,
                    "updates": u.updates,
                }
                for u in self.units
            ],
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state):
        self.step = state["step"]
        self.history = [[np.array(c) for c in snap] for snap in state["history"]]
        self.units = []
        for u in state["units"]:
            self.units.append(HiddenUnits(
                u["name"],
                {k: np.array(v) for k, v in u["ema"].items()},
                None if u["labels"] is None else np.array(u["labels"], dtype=np.int64),
                u["last_shift"],
                u["updates"],
            ))
        self.rng.bit_generator.state = state["rng"]


def _np_group_means(x, labels, C):
    x = np.asarray(x, dtype=np.float64)
    return np.array([x[labels == j].mean(axis=0) for j in range(C)])
