"""Dense tensors with a define-by-run tape for reverse-mode differentiation.

Every op returns a new :class:`Tensor` whose ``_backward`` closure knows how to
push an output gradient onto its parents. Nothing mutates ``data`` in place,
so arrays captured during a forward pass stay valid after later ops run.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc" and dtype is None:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None):
        backward(self, grad)


# ---------------------------------------------------------------------- tape

def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if not _GRAD_ENABLED:
        return out
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True) if g.shape == t.shape else np.broadcast_to(g, t.shape).copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------- elementwise ops

def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        out = []
        if a.requires_grad:
            out.append(_unbroadcast(g, a.shape))
        if b.requires_grad:
            out.append(_unbroadcast(g, b.shape))
        return out

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        out = []
        if a.requires_grad:
            out.append(_unbroadcast(g, a.shape))
        if b.requires_grad:
            out.append(_unbroadcast(-g, b.shape))
        return out

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        out = []
        if a.requires_grad:
            out.append(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            out.append(_unbroadcast(g * a.data, b.shape))
        return out

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        out = []
        if a.requires_grad:
            out.append(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            out.append(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return out

    return _make(a.data / b.data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: [-g])


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant exponent."""
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: [g * p * a.data ** (p - 1.0)])


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: [g * 0.5 / out])


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: [g * out])


def log(a):
    return _make(np.log(a.data), (a,), lambda g: [g / a.data])


def relu(a):
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: [g * keep])


def clip(a, lo, hi):
    """Clamp into ``[lo, hi]``; gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: [g * inside])


# ------------------------------------------------------------ shape & reduce

def sum_(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, a.shape)]

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / count, a.shape)]

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: [g.reshape(a.shape)])


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: [g.transpose(inv)])


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, index):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return [full]

    return _make(a.data[index], (a,), bw)


def concatenate(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return [p for t, p in zip(tensors, parts) if t.requires_grad]

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        return [parts[i] for i, t in enumerate(tensors) if t.requires_grad]

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def embedding(weight, ids):
    """Row gather ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return [full]

    return _make(weight.data[ids], (weight,), bw)


# --------------------------------------------------------------------- linalg

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            out.append(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        return out

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with the leading dims of ``x`` folded for speed."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        out = []
        if x.requires_grad:
            out.append((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            out.append(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            out.append(g2.sum(axis=0))
        return out

    return _make(y.reshape(lead + (weight.shape[1],)), parents, bw)


# ------------------------------------------------------------ fused kernels

def softmax(x, axis=-1):
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]

    return _make(out, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        res = []
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            res.append(gx)
        if gain.requires_grad:
            res.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            res.append(g.reshape(-1, d).sum(axis=0))
        return res

    return _make(out, (x, gain, bias), bw)


def cross_entropy(logits, targets, smoothing=0.0, ignore_index=None):
    """Label-smoothed cross entropy averaged over non-ignored positions.

    The target distribution puts ``1 - smoothing`` on the gold id and spreads
    ``smoothing`` uniformly over the whole vocabulary.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    valid = np.ones_like(tgt, dtype=bool) if ignore_index is None else tgt != ignore_index
    if np.any((tgt[valid] < 0) | (tgt[valid] >= V)):
        raise IndexError(f"target id out of range [0, {V})")
    n = max(int(valid.sum()), 1)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, tgt, 0)
    q = np.full_like(flat, smoothing / V)
    q[np.arange(len(safe)), safe] += 1.0 - smoothing
    q *= valid[:, None]
    loss = -(q * logp).sum() / n

    def bw(g):
        grad = (np.exp(logp) * valid[:, None] - q) * (g / n)
        return [grad.reshape(logits.shape)]

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def dropout(x, p, rng, training=True):
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: [g * keep])
