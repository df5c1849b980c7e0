"""Differentiable tensor primitives.

Each op is a forward/backward pair registered with :func:`defop`; the
lowercase functions below are the public entry points.
"""
from __future__ import annotations

import numpy as np

from .autodiff import defop, record, unbroadcast
from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor

# ---------------------------------------------------------------- elementwise


@defop("add")
class _Add:
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a + b

    def backward(ctx, g):
        return unbroadcast(g, ctx.shapes[0]), unbroadcast(g, ctx.shapes[1])


@defop("sub")
class _Sub:
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a - b

    def backward(ctx, g):
        return unbroadcast(g, ctx.shapes[0]), unbroadcast(-g, ctx.shapes[1])


@defop("mul")
class _Mul:
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a * b

    def backward(ctx, g):
        return unbroadcast(g * ctx.b, ctx.a.shape), unbroadcast(g * ctx.a, ctx.b.shape)


@defop("div")
class _Div:
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a / b

    def backward(ctx, g):
        ga = g / ctx.b
        gb = -g * ctx.a / (ctx.b * ctx.b)
        return unbroadcast(ga, ctx.a.shape), unbroadcast(gb, ctx.b.shape)


@defop("neg")
class _Neg:
    def forward(ctx, a):
        return -a

    def backward(ctx, g):
        return (-g,)


@defop("exp")
class _Exp:
    def forward(ctx, a):
        ctx.out = np.exp(a)
        return ctx.out

    def backward(ctx, g):
        return (g * ctx.out,)


@defop("log")
class _Log:
    def forward(ctx, a):
        ctx.a = a
        return np.log(a)

    def backward(ctx, g):
        return (g / ctx.a,)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@defop("sigmoid")
class _Sigmoid:
    def forward(ctx, a):
        ctx.s = _sigmoid(a)
        return ctx.s

    def backward(ctx, g):
        return (g * ctx.s * (1.0 - ctx.s),)


@defop("silu")
class _Silu:
    def forward(ctx, a):
        ctx.a = a
        ctx.s = _sigmoid(a)
        return a * ctx.s

    def backward(ctx, g):
        s = ctx.s
        return (g * (s + ctx.a * s * (1.0 - s)),)


@defop("softplus")
class _Softplus:
    def forward(ctx, a):
        ctx.a = a
        return np.logaddexp(0.0, a).astype(a.dtype, copy=False)

    def backward(ctx, g):
        return (g * _sigmoid(ctx.a),)


@defop("relu")
class _Relu:
    def forward(ctx, a):
        ctx.mask = a > 0
        return np.where(ctx.mask, a, 0).astype(a.dtype, copy=False)

    def backward(ctx, g):
        return (g * ctx.mask,)


@defop("softmax")
class _Softmax:
    def forward(ctx, a, axis):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        ctx.p = e / e.sum(axis=axis, keepdims=True)
        ctx.axis = axis
        return ctx.p

    def backward(ctx, g):
        p = ctx.p
        return (p * (g - (g * p).sum(axis=ctx.axis, keepdims=True)),)


@defop("log_softmax")
class _LogSoftmax:
    def forward(ctx, a, axis):
        z = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        ctx.p = np.exp(out)
        ctx.axis = axis
        return out

    def backward(ctx, g):
        return (g - ctx.p * g.sum(axis=ctx.axis, keepdims=True),)


@defop("bce_with_logits")
class _BceWithLogits:
    # elementwise: max(x,0) - x*y + log(1 + exp(-|x|))
    def forward(ctx, x, y):
        ctx.x, ctx.y = x, y
        return np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(ctx, g):
        return g * (_sigmoid(ctx.x) - ctx.y), None


# ----------------------------------------------------------------- reductions


@defop("sum")
class _Sum:
    def forward(ctx, a, axis, keepdims):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


@defop("mean")
class _Mean:
    def forward(ctx, a, axis, keepdims):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        ctx.count = a.size // max(out.size, 1) if not keepdims else a.size // out.size
        return out

    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g / ctx.count, ctx.shape).copy(),)


@defop("global_avg_pool")
class _GlobalAvgPool:
    def forward(ctx, x):
        ctx.shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(ctx, g):
        b, h, w, c = ctx.shape
        return (np.broadcast_to(g[:, None, None, :] / (h * w), ctx.shape).copy(),)


# ------------------------------------------------------------------- shaping


@defop("reshape")
class _Reshape:
    def forward(ctx, a, shape):
        ctx.shape = a.shape
        return a.reshape(shape)

    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


@defop("transpose")
class _Transpose:
    def forward(ctx, a, axes):
        ctx.inv = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    def backward(ctx, g):
        return (np.ascontiguousarray(g.transpose(ctx.inv)),)


@defop("flip")
class _Flip:
    def forward(ctx, a, axis):
        ctx.axis = axis
        return np.ascontiguousarray(np.flip(a, axis))

    def backward(ctx, g):
        return (np.ascontiguousarray(np.flip(g, ctx.axis)),)


@defop("stack")
class _Stack:
    def forward(ctx, *arrays, axis):
        ctx.axis, ctx.n = axis, len(arrays)
        return np.stack(arrays, axis=axis)

    def backward(ctx, g):
        return tuple(np.take(g, i, axis=ctx.axis) for i in range(ctx.n))


@defop("concat")
class _Concat:
    def forward(ctx, *arrays, axis):
        ctx.axis = axis
        ctx.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(ctx, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, ctx.splits, axis=ctx.axis))


@defop("take")
class _Take:
    def forward(ctx, a, index, axis):
        ctx.shape, ctx.index, ctx.axis = a.shape, index, axis
        return np.ascontiguousarray(np.take(a, index, axis=axis))

    def backward(ctx, g):
        full = np.zeros(ctx.shape, dtype=g.dtype)
        sl = [slice(None)] * len(ctx.shape)
        sl[ctx.axis] = ctx.index
        full[tuple(sl)] = g
        return (full,)


@defop("channel_select")
class _ChannelSelect:
    # out[..., c] = a[..., c] if mask[c] else b[..., c]
    def forward(ctx, a, b, mask):
        ctx.mask = mask
        return np.where(mask, a, b)

    def backward(ctx, g):
        zero = np.zeros((), dtype=g.dtype)
        return np.where(ctx.mask, g, zero), np.where(ctx.mask, zero, g)


# ---------------------------------------------------------------- linear algebra


@defop("matmul")
class _Matmul:
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a @ b

    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


@defop("dwconv2d")
class _DwConv2d:
    # x: (B, H, W, C), k: (C, kh, kw); stride 1, zero "same" padding
    def forward(ctx, x, k):
        _, h, w, _ = x.shape
        kh, kw = k.shape[1:]
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        out = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, i:i + h, j:j + w, :] * k[:, i, j]
        ctx.xp, ctx.k, ctx.hw, ctx.pad = xp, k, (h, w), (ph, pw)
        return out

    def backward(ctx, g):
        xp, k = ctx.xp, ctx.k
        h, w = ctx.hw
        ph, pw = ctx.pad
        kh, kw = k.shape[1:]
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h, j:j + w, :] += g * k[:, i, j]
                gk[:, i, j] = (g * xp[:, i:i + h, j:j + w, :]).sum(axis=(0, 1, 2))
        return gxp[:, ph:ph + h, pw:pw + w, :], gk


@defop("layernorm")
class _LayerNorm:
    # normalizes over the last axis
    def forward(ctx, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        ctx.xhat, ctx.rstd, ctx.gamma = xhat, rstd, gamma
        return xhat * gamma + beta

    def backward(ctx, g):
        xhat, rstd, gamma = ctx.xhat, ctx.rstd, ctx.gamma
        gx_hat = g * gamma
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


# ------------------------------------------------------------------ public API


def add(a, b) -> Tensor:
    return record("add", a, b)


def sub(a, b) -> Tensor:
    return record("sub", a, b)


def mul(a, b) -> Tensor:
    return record("mul", a, b)


def div(a, b) -> Tensor:
    return record("div", a, b)


def neg(a) -> Tensor:
    return record("neg", a)


def exp(a) -> Tensor:
    return record("exp", a)


def log(a) -> Tensor:
    return record("log", a)


def sigmoid(x) -> Tensor:
    return record("sigmoid", x)


def silu(x) -> Tensor:
    return record("silu", x)


def softplus(x) -> Tensor:
    return record("softplus", x)


def relu(x) -> Tensor:
    return record("relu", x)


def softmax(x, axis: int = -1) -> Tensor:
    return record("softmax", x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return record("log_softmax", x, axis=axis)


def bce_with_logits(logits, targets) -> Tensor:
    return record("bce_with_logits", logits, targets)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return record("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return record("mean", x, axis=axis, keepdims=keepdims)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of a ``(B, H, W, C)`` map -> ``(B, C)``."""
    _check_feature_map(x, "global_avg_pool")
    return record("global_avg_pool", x)


def reshape(x, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return record("reshape", x, shape=shape)


def transpose(x, axes) -> Tensor:
    return record("transpose", x, axes=tuple(axes))


def flip(x, axis: int) -> Tensor:
    return record("flip", x, axis=axis)


def stack(tensors, axis: int = 0) -> Tensor:
    return record("stack", *tensors, axis=axis)


def concat(tensors, axis: int = -1) -> Tensor:
    return record("concat", *tensors, axis=axis)


def take(x, index: int, axis: int = 0) -> Tensor:
    return record("take", x, index=index, axis=axis)


def channel_select(a, b, mask: np.ndarray) -> Tensor:
    """Per channel (last axis): take ``a`` where ``mask`` is true, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"channel_select shapes differ: {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.shape[-1],):
        raise DimensionError(f"mask shape {mask.shape} does not match channels {a.shape[-1]}")
    return record("channel_select", a, b, mask=mask)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy broadcasting elsewhere."""
    a, b = as_tensor(a), as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return record("matmul", a, b)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def dwconv2d(x, kernels) -> Tensor:
    """Depthwise 2-D convolution, stride 1, zero "same" padding.

    ``x`` is ``(B, H, W, C)``; ``kernels`` is ``(C, k, k)`` with odd ``k``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    _check_feature_map(x, "dwconv2d")
    if kernels.ndim != 3 or kernels.shape[0] != x.shape[-1]:
        raise DimensionError(
            f"dwconv2d kernels {kernels.shape} do not match input channels {x.shape[-1]}")
    if kernels.shape[1] % 2 == 0 or kernels.shape[2] % 2 == 0:
        raise ContractError(f"dwconv2d kernel extents must be odd, got {kernels.shape[1:]}")
    return record("dwconv2d", x, kernels)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis, then scale and shift."""
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    return record("layernorm", x, gamma, beta, eps=eps)


def _check_feature_map(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a (B, H, W, C) feature map, got shape {x.shape}")
