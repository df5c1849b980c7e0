"""Selective state-space kernel.

Per channel ``c`` and state index ``n`` the recurrence is::

    h[t] = exp(dt[t, c] * A[c, n]) * h[t-1] + Bbar[t, c, n] * x[t, c]
    y[t, c] = sum_n C[t, n] * h[t, c, n] + D[c] * x[t, c]

with ``h[-1] = 0``, ``A = -exp(A_log)`` and zero-order-hold input scaling
``Bbar = (exp(dt*A) - 1) / A * B``. ``B``, ``C`` and ``dt`` are projected
from the input at every step.

Parameters may carry leading "stack" axes (e.g. four scan directions); the
input then carries the same leading axes before its batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import defop, record, unbroadcast
from .errors import ContractError, DimensionError, NumericError
from .module import Init, Module
from .tensor import Tensor, as_tensor

TAYLOR_THRESHOLD = 1e-6
STRATEGIES = ("sequential", "chunked", "blelloch", "fused")
# strategies usable by linear_scan on precomputed coefficients
LINEAR_STRATEGIES = ("sequential", "chunked", "blelloch")


class SsmParams(Module):
    """Selective-SSM weights for one scan instance (or a stack of them)."""

    def __init__(self, channels: int, state: int, init: Init, stack: tuple[int, ...] = (),
                 c_proj: bool = True):
        if state < 1:
            raise ContractError("state size N must be >= 1")
        self.channels, self.state, self.stack = channels, state, tuple(stack)
        s = self.stack
        a_init = np.broadcast_to(np.log(np.arange(1, state + 1, dtype=np.float64)),
                                 s + (channels, state))
        self.A_log = init.array(a_init)
        self.D = init.ones(*s, channels)
        self.W_B = init.trunc_normal(*s, channels, state)
        self.B_bias = init.zeros(*s, state)
        if c_proj:
            self.W_C = init.trunc_normal(*s, channels, state)
            self.C_bias = init.zeros(*s, state)
        self.W_dt = init.trunc_normal(*s, channels, channels)
        self.dt_bias = init.zeros(*s, channels)

    @property
    def has_c_proj(self) -> bool:
        return hasattr(self, "W_C")


@dataclass
class Selection:
    B: Tensor
    C: Tensor | None
    delta: Tensor


@dataclass
class DiscreteStep:
    a_bar: np.ndarray
    b_bar: np.ndarray


# ------------------------------------------------------------- discretization


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the small-|z| branch 1 + z/2."""
    small = np.abs(z) < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _dphi(z: np.ndarray, ez: np.ndarray) -> np.ndarray:
    """d/dz of (exp(z) - 1) / z given ``ez = exp(z)``; a series below
    |z| = 1e-3 avoids cancellation."""
    small = np.abs(z) < 1e-3
    out = (ez * (z - 1.0) + 1.0) / np.where(small, 1.0, z * z)
    if small.any():
        zs = z[small]
        out[small] = 0.5 + zs * (1.0 / 3.0 + zs * (0.125 + zs / 30.0))
    return out


def discretize(A, B, delta) -> DiscreteStep:
    """Zero-order hold for diagonal ``A``: elementwise ``exp(delta*A)`` and
    ``(exp(delta*A) - 1) / A * B``, falling back to ``delta*(1 + delta*A/2)*B``
    when ``|delta*A| < 1e-6``."""
    A = np.asarray(A, dtype=np.float64 if np.asarray(A).dtype.kind != "f" else None)
    B = np.asarray(B, dtype=A.dtype)
    delta = np.asarray(delta, dtype=A.dtype)
    if np.any(delta <= 0):
        raise ContractError("discretize requires delta > 0")
    z = delta * A
    small = np.abs(z) < TAYLOR_THRESHOLD
    safe_a = np.where(small, 1.0, A)
    b_bar = np.where(small, delta * (1.0 + 0.5 * z) * B, np.expm1(z) / safe_a * B)
    return DiscreteStep(np.exp(z), b_bar)


# ---------------------------------------------------------------- scan element


def compose(second: tuple, first: tuple) -> tuple:
    """Affine maps h -> a*h + b; ``compose(e2, e1)`` applies ``e1`` first."""
    a1, b1 = first
    a2, b2 = second
    return a1 * a2, a2 * b1 + b2


def apply_element(e: tuple, h):
    return e[0] * h + e[1]


# ----------------------------------------------------------------- linear scan


def _scan_sequential(a, b):
    h = np.empty_like(b)
    cur = np.zeros_like(b[0])
    for t in range(a.shape[0]):
        cur = a[t] * cur + b[t]
        h[t] = cur
    return h


def _prefix_doubling(a, b):
    # inclusive prefix of affine maps by recursive doubling; a, b copied
    a = a.copy()
    b = b.copy()
    off = 1
    n = a.shape[0]
    while off < n:
        b[off:] = a[off:] * b[:-off] + b[off:]
        a[off:] = a[off:] * a[:-off]
        off *= 2
    return a, b


def _scan_chunked(a, b, chunk):
    n = a.shape[0]
    h = np.empty_like(b)
    carry = np.zeros_like(b[0])
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        pa, pb = _prefix_doubling(a[s:e], b[s:e])
        h[s:e] = pa * carry + pb
        carry = h[e - 1]
    return h


def _scan_blelloch(a, b):
    n = a.shape[0]
    size = 1 << max(0, (n - 1).bit_length())
    ta = np.ones((size,) + a.shape[1:], dtype=a.dtype)
    tb = np.zeros((size,) + b.shape[1:], dtype=b.dtype)
    ta[:n], tb[:n] = a, b
    # up-sweep: each right node becomes (left then right)
    stride = 2
    while stride <= size:
        r = np.arange(stride - 1, size, stride)
        left = r - stride // 2
        tb[r] = ta[r] * tb[left] + tb[r]
        ta[r] = ta[left] * ta[r]
        stride *= 2
    ta[size - 1], tb[size - 1] = 1.0, 0.0
    stride = size
    while stride >= 2:
        r = np.arange(stride - 1, size, stride)
        left = r - stride // 2
        la, lb = ta[left].copy(), tb[left].copy()
        ra, rb = ta[r].copy(), tb[r].copy()
        ta[left], tb[left] = ra, rb
        # prefix-before-left, then the left subtree
        ta[r] = ra * la
        tb[r] = la * rb + lb
        stride //= 2
    # exclusive prefix applied to h0 = 0 is tb; one more step makes it inclusive
    return a * tb[:n] + b


def linear_scan(a: np.ndarray, b: np.ndarray, axis: int = 0,
                strategy: str = "sequential", chunk: int = 64) -> np.ndarray:
    """Solve ``h[t] = a[t] * h[t-1] + b[t]`` along ``axis`` with ``h[-1] = 0``."""
    if strategy not in LINEAR_STRATEGIES:
        raise ContractError(
            f"unknown scan strategy {strategy!r}; choose from {LINEAR_STRATEGIES}")
    if chunk < 1:
        raise ContractError("chunk must be >= 1")
    a = np.moveaxis(np.broadcast_to(a, b.shape), axis, 0)
    b = np.moveaxis(b, axis, 0)
    if strategy == "sequential":
        h = _scan_sequential(a, b)
    elif strategy == "chunked":
        h = _scan_chunked(a, b, chunk)
    else:
        h = _scan_blelloch(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return np.moveaxis(h, 0, axis)


def decode(h, c, d, u):
    """Readout ``y[t, ch] = <c[t], h[t, ch]> + d[ch] * u[t, ch]``.

    ``h`` is ``(..., L, C, N)``, ``c`` is ``(..., L, N)``, ``d`` is
    ``(..., C)`` and ``u`` is ``(..., L, C)``.
    """
    h, c, d, u = (np.asarray(v) for v in (h, c, d, u))
    return (h @ c[..., :, None])[..., 0] + d[..., None, :] * u


def _first_bad_step(h: np.ndarray) -> int:
    bad = ~np.isfinite(h.reshape(h.shape[0], -1)).all(axis=1)
    return int(np.argmax(bad))


@defop("selective_scan")
class _SelectiveScan:
    # u, delta: (*S, L, C); A: (*P, C, N); Bm, Cm: (*S, L, N); D: (*P, C)
    def forward(ctx, u, delta, A, Bm, Cm, D, strategy, chunk):
        ctx.strategy, ctx.chunk = strategy, chunk
        if strategy == "fused":
            return _fused_forward(ctx, u, delta, A, Bm, Cm, D)
        z = delta[..., None] * A[..., None, :, :]
        a = np.exp(z)
        phi = _phi(z)
        du = delta * u
        bx = du[..., None] * phi * Bm[..., None, :]
        h = linear_scan(a, bx, axis=-3, strategy=strategy, chunk=chunk)
        if not np.isfinite(h).all():
            t = _first_bad_step(np.moveaxis(h, -3, 0))
            raise NumericError(f"selective scan state non-finite at timestep {t}")
        ctx.saved = (u, delta, A, Bm, Cm, D, z, a, phi, h)
        return decode(h, Cm, D, u)

    def backward(ctx, gy):
        if ctx.strategy == "fused":
            return _fused_backward(ctx, gy)
        u, delta, A, Bm, Cm, D, z, a, phi, h = ctx.saved
        gCm = unbroadcast((gy[..., None] * h).sum(axis=-2), Cm.shape)
        gD = unbroadcast((gy * u).sum(axis=-2), D.shape)
        gh = gy[..., None] * Cm[..., None, :]
        # adjoint recurrence, run backwards in time
        a_next = np.zeros_like(a if a.shape == h.shape else np.broadcast_to(a, h.shape))
        a_next[..., :-1, :, :] = np.broadcast_to(a, h.shape)[..., 1:, :, :]
        lam = np.flip(linear_scan(np.flip(a_next, -3), np.flip(gh, -3), axis=-3,
                                  strategy=ctx.strategy, chunk=ctx.chunk), -3)
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        g_a = lam * h_prev
        B4 = Bm[..., None, :]
        u4 = u[..., None]
        d4 = delta[..., None]
        gu = D[..., None, :] * gy + (lam * phi * B4).sum(axis=-1) * delta
        gdelta = (g_a * a * A[..., None, :, :] + lam * a * B4 * u4).sum(axis=-1)
        gA = (g_a * a * d4 + lam * _dphi(z, a) * d4 * d4 * B4 * u4).sum(axis=-3)
        gBm = (lam * phi * (d4 * u4)).sum(axis=-2)
        return (gu, gdelta, unbroadcast(gA, A.shape), unbroadcast(gBm, Bm.shape),
                gCm, gD)


def _fused_forward(ctx, u, delta, A, Bm, Cm, D):
    from . import _fused

    lead = np.broadcast_shapes(u.shape[:-2], A.shape[:-2], Bm.shape[:-2], Cm.shape[:-2],
                               D.shape[:-1])
    L, C = u.shape[-2:]
    N = A.shape[-1]

    def flat(x, tail):
        return np.ascontiguousarray(np.broadcast_to(x, lead + tail)).reshape((-1,) + tail)

    args = (flat(u, (L, C)), flat(delta, (L, C)), flat(A, (C, N)), flat(Bm, (L, N)),
            flat(Cm, (L, N)), flat(D, (C,)))
    h = np.empty(args[0].shape + (N,), dtype=u.dtype)
    decay, phi = np.empty_like(h), np.empty_like(h)
    y = _fused.scan_forward(*args, h, decay, phi)
    if not np.isfinite(h).all():
        raise NumericError(f"selective scan state non-finite at timestep "
                           f"{_first_bad_step(np.moveaxis(h, 1, 0))}")
    ctx.args, ctx.states, ctx.lead = args, (h, decay, phi), lead
    ctx.shapes = (u.shape, delta.shape, A.shape, Bm.shape, Cm.shape, D.shape)
    return y.reshape(lead + (L, C))


def _fused_backward(ctx, gy):
    from . import _fused

    g = np.ascontiguousarray(np.broadcast_to(gy, ctx.lead + gy.shape[-2:]))
    grads = _fused.scan_backward(g.reshape(ctx.args[0].shape), *ctx.args, *ctx.states)
    out = []
    for gr, shape, flat_arg in zip(grads, ctx.shapes, ctx.args):
        full = gr.reshape(ctx.lead + flat_arg.shape[1:])
        out.append(unbroadcast(full, shape))
    return tuple(out)


# -------------------------------------------------------------- public entry


def _align(t: Tensor, n_batch: int, core: int) -> Tensor:
    """Insert ``n_batch`` singleton axes between stack axes and the core axes."""
    if n_batch == 0:
        return t
    k = t.ndim - core
    return ops.reshape(t, t.shape[:k] + (1,) * n_batch + t.shape[k:])


def _batch_axes(x: Tensor, p: SsmParams) -> int:
    nb = x.ndim - 2 - len(p.stack)
    if nb < 0 or x.shape[-1] != p.channels or x.shape[:len(p.stack)] != p.stack[:x.ndim]:
        raise DimensionError(
            f"input {x.shape} does not fit ssm params (stack={p.stack}, C={p.channels})")
    return nb


def select_params(x, p: SsmParams, with_c: bool = True) -> Selection:
    """Input-dependent ``B``, ``C`` (``(..., L, N)``) and ``delta`` (``(..., L, C)``)."""
    x = as_tensor(x)
    nb = _batch_axes(x, p)
    k = len(p.stack)
    # fold batch and time into one row axis so every projection is one matmul per stack entry
    rows = ops.reshape(x, x.shape[:k] + (-1, p.channels)) if nb else x
    out_lead = x.shape[:-1]

    def project(w, b, width):
        y = ops.linear(rows, w, _align(b, 1, 1) if k else b)
        return ops.reshape(y, out_lead + (width,)) if nb else y

    B = project(p.W_B, p.B_bias, p.state)
    C = project(p.W_C, p.C_bias, p.state) if with_c and p.has_c_proj else None
    delta = ops.softplus(project(p.W_dt, p.dt_bias, p.channels))
    return Selection(B, C, delta)


def scan_core(u, delta, A, Bm, Cm, D, strategy="sequential", chunk=64) -> Tensor:
    """Differentiable recurrence + readout on already-selected parameters."""
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown scan strategy {strategy!r}")
    if chunk < 1:
        raise ContractError("chunk must be >= 1")
    return record("selective_scan", u, delta, A, Bm, Cm, D, strategy=strategy, chunk=chunk)


def selective_scan(x, p: SsmParams, *, strategy: str = "sequential", chunk: int = 64,
                   c=None) -> Tensor:
    """Run the selective scan of ``x`` (``(*stack, *batch, L, C)``).

    ``c`` overrides the readout sequence (used for shared-decoder fusion);
    otherwise the instance's own C projection is used.
    """
    x = as_tensor(x)
    nb = _batch_axes(x, p)
    sel = select_params(x, p, with_c=c is None)
    readout = sel.C if c is None else c
    if readout is None:
        raise ContractError("ssm params have no C projection; pass an explicit readout")
    A = ops.neg(ops.exp(_align(p.A_log, nb, 2)))
    D = _align(p.D, nb, 1)
    return scan_core(x, sel.delta, A, sel.B, readout, D, strategy=strategy, chunk=chunk)


def selective_scan_seq(x, p: SsmParams) -> Tensor:
    return selective_scan(x, p, strategy="sequential")


def selective_scan_parallel(x, p: SsmParams, chunk: int = 64,
                            strategy: str = "chunked") -> Tensor:
    """Associative-scan evaluation; ``strategy`` is "chunked" or "blelloch"."""
    if strategy == "sequential":
        raise ContractError("use selective_scan_seq for the sequential strategy")
    return selective_scan(x, p, strategy=strategy, chunk=chunk)


def lti_conv_oracle(x, a_bar, b_bar, c, d) -> np.ndarray:
    """Direct O(L^2) convolution for time-invariant parameters.

    ``y[t] = d*x[t] + sum_j (sum_n c[n] a_bar[n]**j b_bar[n]) * x[t-j]``.
    """
    x = np.asarray(x, dtype=np.float64)
    a_bar, b_bar, c = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (a_bar, b_bar, c))
    n = x.shape[0]
    powers = a_bar[None, :] ** np.arange(n)[:, None]
    kernel = powers @ (c * b_bar)
    y = d * x
    for t in range(n):
        y[t] += np.dot(kernel[:t + 1], x[t::-1])
    return y
