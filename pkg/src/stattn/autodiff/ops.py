"""Differentiable operations on :class:`Tensor`.

Binary elementwise ops demand equal shapes.  Shape alignment is always
explicit (``broadcast_to``, ``reshape``, ``expand_channels``), never implied.
Non-smooth points of ``relu``/``abs``/``max0`` take subgradient 0.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DimensionError, NumericError, Tensor, UsageError

Axes = int | Sequence[int] | None


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(f"{opname}: axis {axis} mismatch ({x} vs {y}); shapes {a.shape} and {b.shape}")
        raise DimensionError(f"{opname}: rank mismatch, shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sigmoid(a: Tensor) -> Tensor:
    # exp of -|x| never overflows; both branches keep full relative precision
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


max0 = relu


def abs(a: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "abs": abs,
    "max0": max0,
}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise UsageError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ----------------------------------------------------------------- reductions

def _norm_axes(axes: Axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(a: Tensor, axes: Axes = None) -> Tensor:  # noqa: A001
    ax = _norm_axes(axes, a.ndim)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return Tensor._from_op(a.data.sum(axis=ax), (a,), bw)


def mean(a: Tensor, axes: Axes = None) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape) / count,)

    return Tensor._from_op(a.data.sum(axis=ax) / count, (a,), bw)


def reduce(op: str, a: Tensor, axes: Axes = None) -> Tensor:
    if op == "sum":
        return sum(a, axes)
    if op == "mean":
        return mean(a, axes)
    raise UsageError(f"unknown reduction {op!r}")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise UsageError("add_n needs at least one tensor")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "add_n")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total = total + t.data
    return Tensor._from_op(total, tuple(tensors), lambda g: tuple(g for _ in tensors))


# -------------------------------------------------------------------- softmax

def softmax(v: Tensor, axis: int = -1) -> Tensor:
    x = v.data
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (v,), bw)


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    x = v.data
    if np.isnan(x).any():
        raise NumericError("log_softmax input contains NaN")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (v,), bw)


# --------------------------------------------------------------------- shapes

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly replicate size-1 axes of ``a`` up to ``shape`` (same rank)."""
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise DimensionError(f"broadcast_to keeps rank: {a.shape} -> {shape}")
    axes = []
    for i, (s, t) in enumerate(zip(a.shape, shape)):
        if s != t:
            if s != 1:
                raise DimensionError(f"broadcast_to: axis {i} has extent {s}, cannot expand to {t}")
            axes.append(i)
    axes_t = tuple(axes)

    def bw(g):
        return (g.sum(axis=axes_t, keepdims=True),)

    return Tensor._from_op(np.broadcast_to(a.data, shape).copy(), (a,), bw)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice)) or p is Ellipsis for p in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise DimensionError("concat: rank mismatch")
        for i, (x, y) in enumerate(zip(ref.shape, t.shape)):
            if i != axis and x != y:
                raise DimensionError(f"concat: axis {i} mismatch ({x} vs {y})")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# --------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis mismatch, shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (N, F_in) and weight (F_in, F_out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: feature axis mismatch, shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({wd.shape[1]},)")
        out = out + bias.data
        return Tensor._from_op(out, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))
    return Tensor._from_op(out, (x, weight), lambda g: (g @ wd.T, xd.T @ g))


# ----------------------------------------------------------------- convolution

def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of a (C_in, H, W) or (N, C_in, H, W) input."""
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be rank 3 or 4, got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be rank 4, got shape {kernel.shape}")
    xd = x.data[None] if unbatched else x.data
    wd = kernel.data
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = wd.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c_in}, kernel expects {kc}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise UsageError("conv2d: stride must be >= 1 and padding >= 0")
    k = kh
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    # output extent floors (H + 2P - k) / S, the usual framework convention
    if span_h < 0:
        raise DimensionError(f"conv2d: height axis {h} too small for k={k} P={padding}")
    if span_w < 0:
        raise DimensionError(f"conv2d: width axis {w} too small for k={k} P={padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    if padding:
        xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = xd
    else:
        xp = np.ascontiguousarray(xd, dtype=np.float64)
    sn, sc, sh, sw = xp.strides
    # im2col rows ordered (n, ho, wo), columns ordered (c_in, k, k) to match the kernel layout
    win = as_strided(xp, (n, ho, wo, c_in, k, k), (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    cols = win.reshape(n * ho * wo, c_in * k * k)
    wmat = wd.reshape(c_out, c_in * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def bw(g):
        g4 = g[None] if unbatched else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (gmat.T @ cols).reshape(wd.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c_in, k, k)
        gxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += gcols[..., a, b].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if unbatched:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out[0] if unbatched else out, parents, bw)


# ---------------------------------------------------------------- batch norm

class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * mean
        self.var = (1.0 - m) * self.var + m * var_unbiased


BN_EPS = 1e-5


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats | None = None,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of a (C, H, W) or (N, C, H, W) input.

    Train mode uses the statistics of the presented batch (all axes but
    the channel axis) and updates ``running``; eval mode reads ``running``.
    """
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"batchnorm2d input must be rank 3 or 4, got shape {x.shape}")
    xd = x.data[None] if unbatched else x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: channel axis has {c}, gamma/beta have {gamma.shape}/{beta.shape}")
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    red = (0, 2, 3)
    count = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if mode == "train":
        mu = xd.mean(axis=red, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running is not None:
            unbiased = var.reshape(c) * (count / max(count - 1, 1))
            running.update(mu.reshape(c), unbiased)

        def bw(g):
            g4 = g[None] if unbatched else g
            dbeta = g4.sum(axis=red)
            dgamma = (g4 * xhat).sum(axis=red)
            dxhat = g4 * gd
            dx = inv * (dxhat - dxhat.mean(axis=red, keepdims=True) - xhat * (dxhat * xhat).mean(axis=red, keepdims=True))
            return (dx[0] if unbatched else dx, dgamma, dbeta)

    elif mode == "eval":
        if running is None:
            raise UsageError("batchnorm2d eval mode needs running statistics")
        mu = running.mean[None, :, None, None]
        inv = 1.0 / np.sqrt(running.var[None, :, None, None] + eps)
        xhat = (xd - mu) * inv

        def bw(g):
            g4 = g[None] if unbatched else g
            dx = g4 * gd * inv
            return (dx[0] if unbatched else dx, (g4 * xhat).sum(axis=red), g4.sum(axis=red))

    else:
        raise UsageError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")

    out = xhat * gd + bd
    return Tensor._from_op(out[0] if unbatched else out, (x, gamma, beta), bw)


# ------------------------------------------------------------------- helpers

def expand_channels(mask: Tensor, channels: int) -> Tensor:
    """Replicate a single-channel (..., 1, H, W) tensor across ``channels``."""
    if mask.ndim < 3 or mask.shape[-3] != 1:
        raise DimensionError(f"expand_channels needs a (..., 1, H, W) tensor, got {mask.shape}")
    shape = mask.shape[:-3] + (channels,) + mask.shape[-2:]
    return broadcast_to(mask, shape)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of identical shape (no gradient to ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise DimensionError(f"mul_const: shapes {a.shape} and {c.shape}")
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))
