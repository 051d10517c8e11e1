"""Dense float64 tensors with tape-recorded reverse-mode gradients.

Every op computes its forward value eagerly with numpy. When a :class:`Tape`
is active and at least one input requires a gradient, the op appends a record
holding its output, its inputs and a closure mapping the output gradient to
input gradients. ``Tape.backward`` replays the records in reverse.

Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "transpose",
    "concat",
    "index",
    "broadcast_to",
    "softmax",
    "layer_norm",
    "relu",
    "gelu",
    "avg_pool",
    "conv2d",
    "cross_entropy",
    "total",
    "mean",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable ops executed while it is the active tape."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for parent, g in zip(parents, grads):
                if g is not None and parent.requires_grad:
                    parent.accumulate(g)
        self.records.clear()


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = bool(needs and _ACTIVE)
    if out.requires_grad:
        _ACTIVE[-1].records.append((out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record(xd * cdf, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    ``a`` may be 1-D only when ``b`` is 2-D (vector-matrix product).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    return _record(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(out, tensors, backward)


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; the backward pass scatter-adds."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _record(x.data[key], (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {shape}") from None
    return _record(out, (x,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# normalisation and attention pieces


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _record(s, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gd = gain.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + bias.data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# spatial ops


def pool_matrix(n: int, p: int) -> np.ndarray:
    """Row ``b`` averages indices ``[floor(b*n/p), floor((b+1)*n/p))``."""
    if p > n or p < 1:
        raise DimensionError(f"avg_pool: cannot pool extent {n} to {p} blocks")
    m = np.zeros((p, n))
    for b in range(p):
        lo, hi = (b * n) // p, ((b + 1) * n) // p
        m[b, lo:hi] = 1.0 / (hi - lo)
    return m


def avg_pool(x: Tensor, p: int) -> Tensor:
    """Average-pool the last two axes of ``[..., h, w]`` down to ``p x p`` blocks."""
    if x.data.ndim < 2:
        raise DimensionError(f"avg_pool: need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    ph, pw = pool_matrix(h, p), pool_matrix(w, p)
    out = np.einsum("ph,...hw,qw->...pq", ph, x.data, pw, optimize=True)

    def backward(g):
        return (np.einsum("ph,...pq,qw->...hw", ph, g, pw, optimize=True),)

    return _record(out, (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. ``x``: [B, C, H, W]; ``weight``: [O, C, kh, kw]."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and kernel {weight.shape}")
    kh, kw = weight.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,ho,wo,kh,kw
    wd = weight.data
    out = np.einsum("bchwij,ocij->bohw", cols, wd, optimize=True) + bias.data[None, :, None, None]

    def backward(g):
        gw = np.einsum("bchwij,bohw->ocij", cols, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j], optimize=True)
        H, W = x.shape[2:]
        return gxp[:, :, padding:padding + H, padding:padding + W], gw, gb

    return _record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# reductions and losses


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean over rows of ``weight_i * -log softmax(logits_i)[label_i]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c}): {labels.tolist()}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    value = -(w * logp[rows, labels]).sum() / n

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (w / n)[:, None] * g,)

    return _record(np.asarray(value), (logits,), backward)
