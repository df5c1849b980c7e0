"""Encoder building blocks: patch embedding, patch merging, four-direction
2-D selective scan, the gated VSSM block and squeeze-and-excitation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError, DimensionError
from .module import Init, Module
from .ssm import SsmParams, selective_scan
from .tensor import Tensor

DIRECTIONS = ("row_fwd", "row_bwd", "col_fwd", "col_bwd")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: Init, bias: bool = True, zero: bool = False):
        self.weight = init.zeros(d_in, d_out) if zero else init.trunc_normal(d_in, d_out)
        if bias:
            self.bias = init.zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, getattr(self, "bias", None))


class LayerNorm(Module):
    def __init__(self, channels: int, init: Init, eps: float = 1e-5):
        self.gamma = init.ones(channels)
        self.beta = init.zeros(channels)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps)


class DwConv(Module):
    def __init__(self, channels: int, init: Init, kernel: int = 3):
        self.kernel = init.trunc_normal(channels, kernel, kernel, std=1.0 / kernel)
        self.bias = init.zeros(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dwconv2d(x, self.kernel) + self.bias


@dataclass(frozen=True)
class StageDims:
    """Channel widths and depths of the four encoder stages."""

    c1: int
    depths: tuple[int, int, int, int]
    patch: int = 4
    factor: int = 2

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return tuple(self.c1 * self.factor ** k for k in range(4))

    def spatial(self, img_size: int) -> list[int]:
        """Side length at each stage: img/4, img/8, img/16, img/32."""
        return [img_size // (self.patch * self.factor ** k) for k in range(4)]


class PatchEmbed(Module):
    """Non-overlapping 4x4 patches -> linear -> layernorm."""

    def __init__(self, in_chans: int, dim: int, init: Init, patch: int = 4):
        self.patch = patch
        self.proj = Linear(patch * patch * in_chans, dim, init)
        self.norm = LayerNorm(dim, init)

    def __call__(self, img: Tensor) -> Tensor:
        b, h, w, c = img.shape
        if h % 32 or w % 32:
            raise ContractError(f"image extents must be divisible by 32, got {h}x{w}")
        p = self.patch
        x = ops.reshape(img, (b, h // p, p, w // p, p, c))
        x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ops.reshape(x, (b, h // p, w // p, p * p * c))
        return self.norm(self.proj(x))


class Downsample(Module):
    """2x2 patch merge (4C) -> linear to 2C -> layernorm."""

    def __init__(self, dim: int, init: Init):
        self.proj = Linear(4 * dim, 2 * dim, init, bias=False)
        self.norm = LayerNorm(2 * dim, init)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ContractError(f"downsample needs even extents, got {h}x{w}")
        x = ops.reshape(x, (b, h // 2, 2, w // 2, 2, c))
        x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ops.reshape(x, (b, h // 2, w // 2, 4 * c))
        return self.norm(self.proj(x))


def direction_orders(h: int, w: int) -> np.ndarray:
    """Flat grid index visited at each step, one row per direction."""
    grid = np.arange(h * w).reshape(h, w)
    row = grid.reshape(-1)
    col = grid.T.reshape(-1)
    return np.stack([row, row[::-1], col, col[::-1]])


def ss2d_sequences(x: Tensor) -> Tensor:
    """``(B, H, W, C)`` -> ``(4, B, H*W, C)`` in the four scan orders."""
    b, h, w, c = x.shape
    rows = ops.reshape(x, (b, h * w, c))
    cols = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, h * w, c))
    return ops.stack([rows, ops.flip(rows, 1), cols, ops.flip(cols, 1)], axis=0)


def ss2d_merge(ys: Tensor, h: int, w: int) -> Tensor:
    """Undo each direction's ordering and sum: ``(4, B, L, C)`` -> ``(B, H, W, C)``."""
    _, b, _, c = ys.shape
    row_f = ops.reshape(ops.take(ys, 0), (b, h, w, c))
    row_b = ops.reshape(ops.flip(ops.take(ys, 1), 1), (b, h, w, c))
    col_f = ops.transpose(ops.reshape(ops.take(ys, 2), (b, w, h, c)), (0, 2, 1, 3))
    col_b = ops.transpose(ops.reshape(ops.flip(ops.take(ys, 3), 1), (b, w, h, c)), (0, 2, 1, 3))
    return (row_f + row_b) + (col_f + col_b)


class Ss2d(Module):
    """Four independent selective scans over one grid, merged by summation."""

    def __init__(self, channels: int, state: int, init: Init,
                 strategy: str = "chunked", chunk: int = 64):
        self.ssm = SsmParams(channels, state, init, stack=(4,))
        self.strategy, self.chunk = strategy, chunk

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        ys = selective_scan(ss2d_sequences(x), self.ssm, strategy=self.strategy, chunk=self.chunk)
        return ss2d_merge(ys, h, w)


def ss2d(x: Tensor, p: Ss2d) -> Tensor:
    return p(x)


class VssmBlock(Module):
    """Pre-norm gated block::

        n = layernorm(x)
        u = silu(dwconv(linear(n)));  g = silu(linear(n))
        out = x + linear(ss2d(u) * g)

    The output projection starts at zero, so a fresh block is the identity.
    """

    def __init__(self, dim: int, state: int, init: Init, kernel: int = 3,
                 strategy: str = "chunked", chunk: int = 64):
        self.norm = LayerNorm(dim, init)
        self.in_proj = Linear(dim, dim, init)
        self.conv = DwConv(dim, init, kernel)
        self.gate_proj = Linear(dim, dim, init)
        self.ss2d = Ss2d(dim, state, init, strategy, chunk)
        self.out_proj = Linear(dim, dim, init, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        n = self.norm(x)
        u = ops.silu(self.conv(self.in_proj(n)))
        g = ops.silu(self.gate_proj(n))
        return x + self.out_proj(self.ss2d(u) * g)


class SeGate(Module):
    """Squeeze-and-excitation: pool -> linear/relu -> linear/sigmoid."""

    def __init__(self, channels: int, init: Init, reduction: int = 4):
        if channels % reduction:
            raise ContractError(f"SE reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction
        self.reduction = reduction
        self.squeeze = Linear(channels, hidden, init)
        self.excite = Linear(hidden, channels, init)

    def __call__(self, x: Tensor) -> Tensor:
        s = ops.relu(self.squeeze(ops.global_avg_pool(x)))
        return ops.sigmoid(self.excite(s))


def se_gate(x: Tensor, p: SeGate) -> Tensor:
    return p(x)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply a ``(B, H, W, C)`` map by a ``(B, C)`` gate."""
    if gate.shape != (x.shape[0], x.shape[-1]):
        raise DimensionError(f"gate {gate.shape} does not match map {x.shape}")
    return x * ops.reshape(gate, (x.shape[0], 1, 1, x.shape[-1]))


class Encoder(Module):
    """Patch embedding plus four stages; returns every stage's output."""

    def __init__(self, in_chans: int, dims: StageDims, state: int, init: Init,
                 kernel: int = 3, strategy: str = "chunked", chunk: int = 64):
        widths = dims.widths
        self.embed = PatchEmbed(in_chans, widths[0], init, dims.patch)
        self.stages = []
        self.downs = []
        for k, (width, depth) in enumerate(zip(widths, dims.depths)):
            if k > 0:
                self.downs.append(Downsample(widths[k - 1], init))
            self.stages.append(
                _Stage([VssmBlock(width, state, init, kernel, strategy, chunk)
                        for _ in range(depth)]))

    def __call__(self, img: Tensor) -> list[Tensor]:
        x = self.embed(img)
        feats = []
        for k, stage in enumerate(self.stages):
            if k > 0:
                x = self.downs[k - 1](x)
            x = stage(x)
            feats.append(x)
        return feats


class _Stage(Module):
    def __init__(self, blocks: list[VssmBlock]):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x
