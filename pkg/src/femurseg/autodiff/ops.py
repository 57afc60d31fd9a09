"""Differentiable primitives.

Every function takes and returns :class:`Tensor`; the backward rule for each is
a closure recorded on the active tape. Layout is channels-first:
``(batch, channel, *spatial)`` with spatial rank 2 or 3.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence, Union

import numpy as np

from ..errors import ContractViolation
from .tensor import Tensor, record

Number = Union[int, float]


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return record(out, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: Number) -> Tensor:
    out = x.data ** exponent
    return record(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: Number | None = None, hi: Number | None = None) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return record(out, (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record(x.data * pos, (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return record(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), vjp)


def channel_softmax(x: Tensor) -> Tensor:
    return softmax(x, axis=1)


# --- reductions and shape ----------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else prod(
        x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,)))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if out.base is not None:
        out = out.copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return record(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ContractViolation(
                f"concat needs matching extents off axis {axis}: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record(out, tuple(tensors), vjp)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: ``(N, C, *S) -> (N, C)``."""
    return mean(x, axis=tuple(range(2, x.ndim)))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


# --- convolution ---------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: int = 1
    padding: Union[str, int] = "same"

    def __post_init__(self):
        if self.stride < 1:
            raise ContractViolation(f"stride must be >= 1, got {self.stride}")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise ContractViolation(f"'same' padding needs odd kernel extents, got {self.kernel}")

    @property
    def pad(self) -> tuple:
        if self.padding == "same":
            return tuple(k // 2 for k in self.kernel)
        return (int(self.padding),) * len(self.kernel)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def output_extents(self, extents: Sequence[int]) -> tuple:
        return tuple((n + 2 * p - k) // self.stride + 1
                     for n, p, k in zip(extents, self.pad, self.kernel))


def _window_slices(offset, stride, out_sp):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sp))


def conv(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor) -> Tensor:
    """2D or 3D cross-correlation via im2col + one GEMM."""
    rank = len(spec.kernel)
    if x.ndim != rank + 2 or x.shape[1] != spec.in_channels:
        raise ContractViolation(
            f"conv input shape {x.shape} does not match spec "
            f"(in_channels={spec.in_channels}, spatial rank {rank})")
    if weight.shape != spec.weight_shape or bias.shape != (spec.out_channels,):
        raise ContractViolation(
            f"conv weight/bias shapes {weight.shape}/{bias.shape} do not match "
            f"expected {spec.weight_shape}/{(spec.out_channels,)}")
    n_batch, cin = x.shape[:2]
    out_sp = spec.output_extents(x.shape[2:])
    if any(n < 1 for n in out_sp):
        raise ContractViolation(f"conv output would be empty for input {x.shape} and {spec}")
    pad = spec.pad
    xp = x.data
    if any(pad):
        xp = np.pad(xp, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    n_k = prod(spec.kernel)
    n_out = prod(out_sp)
    one_by_one = n_k == 1 and spec.stride == 1 and not any(pad)
    xt = xp.transpose((1, 0) + tuple(range(2, rank + 2)))
    if one_by_one:
        col = np.ascontiguousarray(xt).reshape(cin, n_batch * n_out)
    else:
        col = np.empty((cin, n_k, n_batch) + out_sp, dtype=x.dtype)
        for ki, off in enumerate(np.ndindex(*spec.kernel)):
            col[:, ki] = xt[(slice(None), slice(None)) + _window_slices(off, spec.stride, out_sp)]
        col = col.reshape(cin * n_k, n_batch * n_out)
    wm = weight.data.reshape(spec.out_channels, -1)
    out = (wm @ col).reshape((spec.out_channels, n_batch) + out_sp)
    out = np.ascontiguousarray(out.transpose((1, 0) + tuple(range(2, rank + 2))))
    out += bias.data.reshape((1, -1) + (1,) * rank)

    def vjp(g):
        gm = g.transpose((1, 0) + tuple(range(2, rank + 2))).reshape(spec.out_channels, -1)
        gw = (gm @ col.T).reshape(weight.shape)
        gb = gm.sum(axis=1)
        gx = None
        if x.requires_grad:
            dcol = wm.T @ gm
            if one_by_one:
                gx = dcol.reshape((cin, n_batch) + out_sp)
            else:
                dcol = dcol.reshape((cin, n_k, n_batch) + out_sp)
                gxp = np.zeros((cin, n_batch) + xp.shape[2:], dtype=x.dtype)
                for ki, off in enumerate(np.ndindex(*spec.kernel)):
                    gxp[(slice(None), slice(None)) + _window_slices(off, spec.stride, out_sp)] += dcol[:, ki]
                inner = tuple(slice(p, p + n) for p, n in zip(pad, x.shape[2:]))
                gx = gxp[(slice(None), slice(None)) + inner]
            gx = np.ascontiguousarray(gx.transpose((1, 0) + tuple(range(2, rank + 2))))
        return gx, gw, gb

    return record(out, (x, weight, bias), vjp)


# --- pooling / resampling ----------------------------------------------------

def _as_extent(v, rank: int) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * rank


def max_pool(x: Tensor, window=2, stride=None) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first index in scan order."""
    rank = x.ndim - 2
    window = _as_extent(window, rank)
    stride = _as_extent(stride if stride is not None else window, rank)
    if window != stride:
        raise ContractViolation(f"max_pool supports window == stride only, got {window}/{stride}")
    sp = x.shape[2:]
    if any(n % s for n, s in zip(sp, stride)):
        raise ContractViolation(f"max_pool: extents {sp} not divisible by stride {stride}")
    n_batch, c = x.shape[:2]
    out_sp = tuple(n // s for n, s in zip(sp, stride))
    split = (n_batch, c) + tuple(v for pair in zip(out_sp, stride) for v in pair)
    perm = (0, 1) + tuple(2 + 2 * i for i in range(rank)) + tuple(3 + 2 * i for i in range(rank))
    blocks = x.data.reshape(split).transpose(perm).reshape((n_batch, c) + out_sp + (prod(stride),))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        gb = gb.reshape((n_batch, c) + out_sp + stride).transpose(inv)
        return (gb.reshape(x.shape),)

    return record(out, (x,), vjp)


def upsample_nearest(x: Tensor, factor=2) -> Tensor:
    rank = x.ndim - 2
    factor = _as_extent(factor, rank)
    if any(f < 2 for f in factor):
        raise ContractViolation(f"upsample factor must be >= 2, got {factor}")
    out = x.data
    for i, f in enumerate(factor):
        out = np.repeat(out, f, axis=2 + i)

    def vjp(g):
        split = x.shape[:2] + tuple(v for n, f in zip(x.shape[2:], factor) for v in (n, f))
        return (g.reshape(split).sum(axis=tuple(3 + 2 * i for i in range(rank))),)

    return record(out, (x,), vjp)


# --- normalization -------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: dict, train: bool) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    ``stats`` holds ``mean``, ``var`` and ``count`` arrays; train mode updates
    them in place as ``running = 0.9 * running + 0.1 * batch``.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    g_ = gamma.data.reshape(bshape)
    if train:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        m = x.data.size // x.shape[1]
        unbiased = var.reshape(-1) * (m / max(m - 1, 1))
        stats["mean"][...] = BN_MOMENTUM * stats["mean"] + (1 - BN_MOMENTUM) * mu.reshape(-1)
        stats["var"][...] = BN_MOMENTUM * stats["var"] + (1 - BN_MOMENTUM) * unbiased
        stats["count"][...] += 1
    else:
        if stats["count"].reshape(-1)[0] < 1:
            raise ContractViolation("batch_norm eval mode used before any training step")
        inv = (1.0 / np.sqrt(stats["var"] + BN_EPS)).reshape(bshape).astype(x.dtype)
        xhat = (x.data - stats["mean"].reshape(bshape).astype(x.dtype)) * inv
    out = g_ * xhat + beta.data.reshape(bshape)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * g_
        if train:
            m = x.data.size // x.shape[1]
            gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), vjp)


def new_bn_stats(channels: int) -> dict:
    return {"mean": np.zeros(channels, np.float32), "var": np.ones(channels, np.float32),
            "count": np.zeros(1, np.float32)}
