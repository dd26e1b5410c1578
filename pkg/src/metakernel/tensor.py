"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are appended to
the tape when at least one input requires a gradient.  ``backward(loss,
tape)`` replays the records in reverse and accumulates into ``.grad`` of every
grad-enabled leaf that appears on the tape.  Outside a tape, operations
simply compute values.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, data, requires_grad=False):
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_ACTIVE: list = []


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def leaves(self):
        produced = {id(r.out) for r in self.records}
        seen, out = set(), []
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _emit(op, data, inputs, vjp):
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, inputs, out, vjp))
    return out


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] = ()):
    """Reverse-mode sweep; returns {leaf: gradient} and accumulates ``.grad``.

    Leaves listed in ``wrt`` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    leaves = tape.leaves()
    known = {id(t) for t in leaves}
    for t in wrt:
        if t.requires_grad and id(t) not in known:
            leaves.append(t)
            known.add(id(t))
    # the loss itself may be a leaf (e.g. loss = x for scalar x)
    if loss.requires_grad and id(loss) not in known and not any(r.out is loss for r in tape.records):
        leaves.append(loss)
    result = {}
    for t in leaves:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        else:
            g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, s: float):
    a = as_tensor(a)
    s = float(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _emit("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def relu(a):
    a = as_tensor(a)
    y = np.maximum(a.data, 0.0)
    return _emit("relu", y, (a,), lambda g: (np.where(y > 0, g, 0.0),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    x = a.data
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _emit("softmax", y, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _emit("log_softmax", y, (a,), vjp)


def straight_through(soft, hard):
    """Forward value ``hard`` (constant), gradient of ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError("straight-through operands differ in shape")
    return _emit("straight_through", hard.copy(), (soft,), lambda g: (g,))


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


def cross_entropy(pred, labels, from_logits=True):
    """Mean negative log-likelihood over the batch.

    ``pred`` is (B, K) logits, or probabilities with ``from_logits=False``.
    """
    pred = as_tensor(pred)
    if pred.ndim != 2:
        raise ShapeError("cross_entropy expects (batch, classes)")
    labels = _check_labels(labels, pred.shape[1])
    if labels.shape[0] != pred.shape[0]:
        raise ShapeError("batch size differs between predictions and labels")
    logp = log_softmax(pred, axis=1) if from_logits else log(pred)
    onehot = np.zeros(pred.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return scale(tsum(mul(logp, onehot)), -1.0 / labels.shape[0])


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects (B, C, H, W)")
    return mean(x, axis=(2, 3))


def linear(x, w, b=None):
    """(B, I) @ (O, I)^T + (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes {x.shape} and {w.shape} do not conform")
    xd, wd = x.data, w.data
    y = _emit("linear", xd @ wd.T, (x, w), lambda g: (g @ wd, g.T @ xd))
    return y if b is None else add(y, b)


def channel_affine(x, gamma, beta):
    """Per-channel ``gamma * x + beta`` on (B, C, H, W)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    return add(mul(x, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


# ---------------------------------------------------------------------------
# convolution

def _resolve_padding(padding, kh, kw):
    if isinstance(padding, str):
        if padding != "same":
            raise ValueError(f"unknown padding mode {padding!r}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernel extents, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if np.isscalar(padding):
        ph = pw = int(padding)
    else:
        ph, pw = (int(p) for p in padding)
    if ph < 0 or pw < 0:
        raise ValueError("padding must be non-negative")
    return ph, pw


def _conv_checks(x, k, stride, ph, pw):
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv expects 4-D input and kernel")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if k.shape[2] > x.shape[2] + 2 * ph or k.shape[3] > x.shape[3] + 2 * pw:
        raise ShapeError(f"kernel {k.shape[2:]} larger than padded input {x.shape[2:]}")


def conv2d(x, k, stride=1, padding=0):
    x, k = as_tensor(x), as_tensor(k)
    ph, pw = _resolve_padding(padding, k.shape[2], k.shape[3])
    _conv_checks(x, k, stride, ph, pw)
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    xd, kd = x.data, k.data
    y = kernels.conv2d_forward(xd, kd, stride, ph, pw)

    def vjp(g):
        gx, gk = kernels.conv2d_backward(g, xd, kd, stride, ph, pw)
        return gx, gk
    return _emit("conv2d", y, (x, k), vjp)


def depthwise_conv2d(x, k, stride=1, padding=0):
    x, k = as_tensor(x), as_tensor(k)
    ph, pw = _resolve_padding(padding, k.shape[2], k.shape[3])
    _conv_checks(x, k, stride, ph, pw)
    if k.shape[1] != 1 or k.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise kernel {k.shape} does not match {x.shape[1]} channels")
    xd, kd = x.data, k.data
    y = kernels.depthwise_forward(xd, kd, stride, ph, pw)

    def vjp(g):
        return kernels.depthwise_backward(g, xd, kd, stride, ph, pw)
    return _emit("depthwise_conv2d", y, (x, k), vjp)


# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable, x, eps: float = 1e-5, max_coords: int | None = None, seed: int = 0):
    """Max over coordinates of |analytic - central difference| / max(1, |fd|).

    ``x`` is a tensor or a sequence of tensors; ``f`` is called with the same
    object and must return a scalar tensor.  ``max_coords`` subsamples
    coordinates per tensor (seeded) for large parameter sets.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    tensors = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
    try:
        with Tape() as tape:
            loss = f(x)
        analytic = backward(loss, tape, wrt=tensors)
        rng = np.random.default_rng(seed)
        worst = 0.0
        for t in tensors:
            ga = analytic[t].reshape(-1)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(fd)))
        return worst
    finally:
        for t, rg in zip(tensors, saved):
            t.requires_grad = rg
            t.grad = None
