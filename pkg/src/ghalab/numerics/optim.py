"""Adam with decoupled weight decay, and the inverse-square-root schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int = 4000
    peak_lr: float = 5e-4

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")

    def __call__(self, step: int) -> float:
        return inverse_sqrt_lr(step, self)


def inverse_sqrt_lr(step: int, schedule: LrSchedule) -> float:
    """Linear warmup to ``peak_lr`` then decay as ``peak_lr * sqrt(warmup / step)``."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = schedule.warmup_steps
    if step <= w:
        return schedule.peak_lr * step / w
    return schedule.peak_lr * math.sqrt(w / step)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping.

    Weight decay is applied directly to the parameters (scaled by lr), outside
    the moment estimates.
    """

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=1e-4,
                 clip_norm=None):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        grads = {n: p.grad for n, p in self.params.items()}
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                  for g in grads.values() if g is not None))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-6)
                grads = {n: None if g is None else g * scale for n, g in grads.items()}
        new = adam_step({n: p.data for n, p in self.params.items()}, grads, self.state, lr,
                        self.weight_decay)
        for n, p in self.params.items():
            p.data = new[n]


def adam_step(params, grads, state: OptimizerState, lr, weight_decay=0.0):
    """One Adam update; returns new parameter arrays and advances ``state`` in place.

    Parameters with no gradient are treated as having a zero gradient, so their
    moments still decay.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p - lr * update
        if weight_decay:
            new = new - lr * weight_decay * p
        out[name] = new.astype(p.dtype, copy=False)
    return out
