"""Two-view fusion: channel-swapping shallow fusion and shared-decoder deep fusion.

Shallow fusion swaps every even channel between the two views, scans each
mixed stream with its own 2-D selective scan, routes channels back to the
view they came from, and reweights each view with the other view's
squeeze-and-excitation gate.

Deep fusion runs three recurrences (view 1, view 2, and their sum) that all
read out through the readout sequence projected from the summed branch.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .blocks import DwConv, LayerNorm, Linear, SeGate, Ss2d, scale_channels, ss2d_merge, \
    ss2d_sequences
from .errors import DimensionError
from .module import Init, Module
from .ssm import SsmParams, select_params, selective_scan
from .tensor import Tensor, as_tensor

BRANCHES = ("v1", "v2", "fuse")


def even_mask(channels: int) -> np.ndarray:
    """True for channels that are exchanged between views (index mod 2 == 0)."""
    return np.arange(channels) % 2 == 0


def interleave(v1, v2) -> tuple[Tensor, Tensor]:
    """Swap even channels: ``w1 = [b0, a1, b2, a3, ...]``, ``w2 = [a0, b1, a2, b3, ...]``."""
    v1, v2 = as_tensor(v1), as_tensor(v2)
    if v1.shape != v2.shape:
        raise DimensionError(f"interleave shapes differ: {v1.shape} vs {v2.shape}")
    m = even_mask(v1.shape[-1])
    return ops.channel_select(v2, v1, m), ops.channel_select(v1, v2, m)


def deinterleave_merge(s1, s2, grid: tuple[int, int] | None = None) -> tuple[Tensor, Tensor]:
    """Send every channel back to the view it came from.

    ``z1`` gathers view-1-origin channels (odd ones stayed in ``s1``, even
    ones travelled in ``s2``); likewise ``z2``. With ``grid=(H, W)`` the
    flattened ``(B, H*W, C)`` results are reshaped to ``(B, H, W, C)``.
    """
    s1, s2 = as_tensor(s1), as_tensor(s2)
    if s1.shape != s2.shape:
        raise DimensionError(f"deinterleave shapes differ: {s1.shape} vs {s2.shape}")
    m = even_mask(s1.shape[-1])
    z1 = ops.channel_select(s2, s1, m)
    z2 = ops.channel_select(s1, s2, m)
    if grid is not None:
        b, c = s1.shape[0], s1.shape[-1]
        z1 = ops.reshape(z1, (b, *grid, c))
        z2 = ops.reshape(z2, (b, *grid, c))
    return z1, z2


class _BranchStem(Module):
    # layernorm -> linear -> depthwise conv -> silu
    def __init__(self, dim: int, init: Init, kernel: int = 3):
        self.norm = LayerNorm(dim, init)
        self.in_proj = Linear(dim, dim, init)
        self.conv = DwConv(dim, init, kernel)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.silu(self.conv(self.in_proj(self.norm(x))))


class _ViewStack(_BranchStem):
    def __init__(self, dim: int, state: int, init: Init, kernel: int = 3,
                 strategy: str = "chunked", chunk: int = 64):
        super().__init__(dim, init, kernel)
        self.ss2d = Ss2d(dim, state, init, strategy, chunk)
        self.out_proj = Linear(dim, dim, init, zero=True)


class CvsmBlock(Module):
    """Cross-view swapping block (shallow fusion).

    ``use_interleave=False`` and ``freeze_gates=True`` are probe switches:
    together they cut every path from one view to the other.
    """

    def __init__(self, dim: int, state: int, init: Init, reduction: int = 4, kernel: int = 3,
                 tie: bool = False, strategy: str = "chunked", chunk: int = 64):
        first = _ViewStack(dim, state, init, kernel, strategy, chunk)
        second = first if tie else _ViewStack(dim, state, init, kernel, strategy, chunk)
        self.views = [first, second]
        self.se = SeGate(dim, init, reduction)
        self.use_interleave = True
        self.freeze_gates = False

    def __call__(self, x1: Tensor, x2: Tensor) -> tuple[Tensor, Tensor]:
        x1, x2 = as_tensor(x1), as_tensor(x2)
        if x1.shape != x2.shape:
            raise DimensionError(f"view shapes differ: {x1.shape} vs {x2.shape}")
        v1, v2 = self.views
        a1, a2 = v1(x1), v2(x2)
        if self.use_interleave:
            a1, a2 = interleave(a1, a2)
        s1, s2 = v1.ss2d(a1), v2.ss2d(a2)
        z1, z2 = deinterleave_merge(s1, s2) if self.use_interleave else (s1, s2)
        if not self.freeze_gates:
            g1, g2 = self.se(z1), self.se(z2)
            z1, z2 = scale_channels(z1, g2), scale_channels(z2, g1)
        return x1 + v1.out_proj(z1), x2 + v2.out_proj(z2)


def cvsm_block(x1: Tensor, x2: Tensor, p: CvsmBlock) -> tuple[Tensor, Tensor]:
    return p(x1, x2)


class MvcmParams(Module):
    """Recurrence weights for the three deep-fusion branches.

    Only the fused branch owns a readout projection; the view branches are
    decoded with it.
    """

    def __init__(self, dim: int, state: int, init: Init, stack: tuple[int, ...] = (),
                 tie: bool = False):
        self.v1 = SsmParams(dim, state, init, stack, c_proj=False)
        self.v2 = self.v1 if tie else SsmParams(dim, state, init, stack, c_proj=False)
        self.fuse = SsmParams(dim, state, init, stack, c_proj=True)


def mvcm_scan(x_v1, x_v2, x_fuse, p: MvcmParams, *, strategy: str = "sequential",
              chunk: int = 64, trace: list | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Three selective recurrences decoded by the fused branch's readout.

    Each branch keeps its own ``A``, ``B``, ``delta`` and ``D``; all three use
    ``C_fuse[t] = x_fuse[t] @ W_C_fuse``. When ``trace`` is a list, the
    readout tensor consumed by each branch is appended as ``(branch, C)``.
    """
    x_v1, x_v2, x_fuse = (as_tensor(v) for v in (x_v1, x_v2, x_fuse))
    if not x_v1.shape == x_v2.shape == x_fuse.shape:
        raise DimensionError(
            f"branch shapes differ: {x_v1.shape}, {x_v2.shape}, {x_fuse.shape}")
    c_fuse = select_params(x_fuse, p.fuse).C
    outs = []
    for name, x, params in zip(BRANCHES, (x_v1, x_v2, x_fuse), (p.v1, p.v2, p.fuse)):
        if trace is not None:
            trace.append((name, c_fuse))
        outs.append(selective_scan(x, params, strategy=strategy, chunk=chunk, c=c_fuse))
    return tuple(outs)


class MvcmBlock(Module):
    """Multi-view combination block (deep fusion)::

        xf = x1 + x2
        a_b = silu(dwconv(linear(layernorm(x_b))))       for b in v1, v2, fuse
        y_v1, y_v2, y_fuse = shared-readout scans of a_b (four directions each)
        g = se(layernorm(xf))
        out = xf + linear(y_v1 * g + y_v2 * g + y_fuse)

    The output projection starts at zero.
    """

    def __init__(self, dim: int, state: int, init: Init, reduction: int = 4, kernel: int = 3,
                 tie: bool = False, strategy: str = "chunked", chunk: int = 64):
        s1 = _BranchStem(dim, init, kernel)
        self.stems = [s1, s1 if tie else _BranchStem(dim, init, kernel),
                      _BranchStem(dim, init, kernel)]
        self.ssm = MvcmParams(dim, state, init, stack=(4,), tie=tie)
        self.fuse_norm = LayerNorm(dim, init)
        self.se = SeGate(dim, init, reduction)
        self.out_proj = Linear(dim, dim, init, zero=True)
        self.strategy, self.chunk = strategy, chunk

    def __call__(self, x1: Tensor, x2: Tensor, trace: list | None = None) -> Tensor:
        x1, x2 = as_tensor(x1), as_tensor(x2)
        if x1.shape != x2.shape:
            raise DimensionError(f"view shapes differ: {x1.shape} vs {x2.shape}")
        _, h, w, _ = x1.shape
        xf = x1 + x2
        seqs = [ss2d_sequences(stem(x)) for stem, x in zip(self.stems, (x1, x2, xf))]
        ys = mvcm_scan(*seqs, self.ssm, strategy=self.strategy, chunk=self.chunk, trace=trace)
        y1, y2, yf = (ss2d_merge(y, h, w) for y in ys)
        g = self.se(self.fuse_norm(xf))
        mixed = scale_channels(y1, g) + scale_channels(y2, g) + yf
        return xf + self.out_proj(mixed)


def mvcm_block(x1: Tensor, x2: Tensor, p: MvcmBlock) -> Tensor:
    return p(x1, x2)
