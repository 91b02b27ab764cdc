"""Central finite-difference oracle for the tape."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, inputs, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. each array in ``inputs``.

    ``fn`` must read the arrays through the tensors it closes over; entries are
    perturbed in place and restored.
    """
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(fn, inputs, h=1e-6):
    """Return the worst relative error between tape and finite-difference gradients.

    Relative error per tensor is ``max|a - n| / max(max|n|, max|a|, 1e-12)``.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    numeric = numeric_grad(fn, inputs, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)) / scale)
    return worst


def random_tensor(rng, *shape, dtype=np.float64, scale=1.0):
    return Tensor(rng.standard_normal(shape).astype(dtype) * scale, requires_grad=True)
