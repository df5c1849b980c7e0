"""End-to-end two-view classifier: encoders, fusion stages and a linear head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops
from .blocks import Encoder, Linear, StageDims
from .errors import ConfigError, DimensionError
from .fusion import CvsmBlock, MvcmBlock
from .module import Init, Module
from .ssm import STRATEGIES
from .tensor import Tensor, as_tensor

FUSION_MODES = ("single_view_v1", "single_view_v2", "early", "late", "cross")
TASKS = ("single_label", "multi_label")
SUBSTITUTES = ("none", "add", "concat")

# widths/depths of the published backbone sizes; reported, never trained here
VARIANTS = {
    "micro": dict(c1=16, depths=(1, 1, 2, 1), state=8),
    "tiny": dict(c1=96, depths=(2, 2, 9, 2), state=16),
    "small": dict(c1=96, depths=(2, 2, 27, 2), state=16),
    "base": dict(c1=128, depths=(2, 2, 27, 2), state=16),
}


@dataclass
class ModelConfig:
    img_size: int = 32
    c1: int = 16
    depths: tuple[int, int, int, int] = (1, 1, 2, 1)
    state: int = 8
    num_classes: int = 2
    task: str = "single_label"
    fusion_mode: str = "cross"
    use_cvsm: bool = True
    use_mvcm: bool = True
    mvcm_substitute: str = "none"
    tie_weights: bool = False
    se_reduction: int = 4
    kernel: int = 3
    scan_strategy: str = "chunked"
    scan_chunk: int = 64
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.validate()

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        if name not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {name!r}")
        return cls(**{**VARIANTS[name], **overrides})

    def validate(self) -> None:
        def check(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        check(isinstance(self.img_size, int) and self.img_size > 0 and self.img_size % 32 == 0,
              "img_size", "must be a positive multiple of 32")
        check(isinstance(self.c1, int) and self.c1 >= 1, "c1", "must be a positive integer")
        check(len(self.depths) == 4, "depths", "needs exactly four stage depths")
        for i, d in enumerate(self.depths):
            check(isinstance(d, int) and d >= 0, f"depths[{i}]", "must be a non-negative integer")
        check(isinstance(self.state, int) and self.state >= 1, "state", "must be >= 1")
        check(isinstance(self.num_classes, int) and self.num_classes >= 1,
              "num_classes", "must be >= 1")
        check(self.task in TASKS, "task", f"must be one of {TASKS}")
        check(self.fusion_mode in FUSION_MODES, "fusion_mode", f"must be one of {FUSION_MODES}")
        check(self.mvcm_substitute in SUBSTITUTES, "mvcm_substitute",
              f"must be one of {SUBSTITUTES}")
        if self.fusion_mode == "cross":
            if self.use_mvcm:
                check(self.mvcm_substitute == "none", "mvcm_substitute",
                      "must be 'none' while use_mvcm is true")
            else:
                check(self.mvcm_substitute != "none", "mvcm_substitute",
                      "choose 'add' or 'concat' when use_mvcm is false")
        check(self.scan_strategy in STRATEGIES, "scan_strategy", f"must be one of {STRATEGIES}")
        check(isinstance(self.scan_chunk, int) and self.scan_chunk >= 1, "scan_chunk", "must be >= 1")
        check(self.kernel % 2 == 1, "kernel", "must be odd")
        check(self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
        c4 = self.c1 * 8
        check(c4 % self.se_reduction == 0 and self.se_reduction >= 1, "se_reduction",
              f"must divide the stage-4 width {c4}")

    @property
    def dims(self) -> StageDims:
        return StageDims(self.c1, self.depths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d


@dataclass
class Prediction:
    logits: Tensor
    probs: np.ndarray = field(repr=False)


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        init = Init(cfg.seed, cfg.dtype)
        dims = cfg.dims
        c4 = dims.widths[-1]
        kw = dict(kernel=cfg.kernel, strategy=cfg.scan_strategy, chunk=cfg.scan_chunk)
        mode = cfg.fusion_mode
        in_chans = 2 if mode == "early" else 1
        first = Encoder(in_chans, dims, cfg.state, init, **kw)
        if mode in ("late", "cross"):
            self.encoders = [first, first if cfg.tie_weights else
                             Encoder(in_chans, dims, cfg.state, init, **kw)]
        else:
            self.encoders = [first]
        head_in = c4
        if mode == "cross":
            if cfg.use_cvsm:
                self.cvsm = CvsmBlock(c4, cfg.state, init, cfg.se_reduction,
                                      tie=cfg.tie_weights, **kw)
            if cfg.use_mvcm:
                self.mvcm = MvcmBlock(c4, cfg.state, init, cfg.se_reduction,
                                      tie=cfg.tie_weights, **kw)
            elif cfg.mvcm_substitute == "concat":
                head_in = 2 * c4
        self.head = Linear(head_in, cfg.num_classes, init)

    # ------------------------------------------------------------------ forward

    def features(self, v1, v2, trace: dict | None = None) -> Tensor:
        """Map the two views to the ``(B, C)`` vector fed to the head."""
        v1, v2 = as_tensor(v1), as_tensor(v2)
        if v1.shape != v2.shape:
            raise DimensionError(f"view shapes differ: {v1.shape} vs {v2.shape}")
        if v1.ndim != 4 or v1.shape[-1] != 1:
            raise DimensionError(f"views must be (B, H, W, 1), got {v1.shape}")
        cfg = self.cfg
        mode = cfg.fusion_mode

        def encode(enc, img, tag):
            feats = enc(img)
            if trace is not None:
                trace[f"stages_{tag}"] = [f.shape for f in feats]
            return feats[-1]

        if mode == "single_view_v1":
            return ops.global_avg_pool(encode(self.encoders[0], v1, "v1"))
        if mode == "single_view_v2":
            return ops.global_avg_pool(encode(self.encoders[0], v2, "v2"))
        if mode == "early":
            both = ops.concat([v1, v2], axis=-1)
            return ops.global_avg_pool(encode(self.encoders[0], both, "early"))
        x1 = encode(self.encoders[0], v1, "v1")
        x2 = encode(self.encoders[1], v2, "v2")
        if mode == "late":
            return (ops.global_avg_pool(x1) + ops.global_avg_pool(x2)) * 0.5
        if cfg.use_cvsm:
            x1, x2 = self.cvsm(x1, x2)
            if trace is not None:
                trace["cvsm"] = (x1.shape, x2.shape)
        if cfg.use_mvcm:
            fused = self.mvcm(x1, x2)
            if trace is not None:
                trace["mvcm"] = fused.shape
        elif cfg.mvcm_substitute == "add":
            fused = x1 + x2
        else:
            fused = ops.concat([x1, x2], axis=-1)
        return ops.global_avg_pool(fused)

    def logits(self, v1, v2, trace: dict | None = None) -> Tensor:
        return self.head(self.features(v1, v2, trace))

    def __call__(self, v1, v2, trace: dict | None = None) -> Prediction:
        z = self.logits(v1, v2, trace)
        if self.cfg.task == "single_label":
            e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
            probs = e / e.sum(axis=-1, keepdims=True)
        else:
            probs = 0.5 * (1.0 + np.tanh(0.5 * z.data))
        return Prediction(z, probs)


def build(cfg: ModelConfig, rng_seed: int | None = None) -> Model:
    if rng_seed is not None:
        cfg = ModelConfig(**{**cfg.to_dict(), "seed": rng_seed})
    return Model(cfg)


def forward(model: Model, v1, v2) -> Prediction:
    return model(v1, v2)


# --------------------------------------------------------------- size and cost


def _linear(i, o, bias=True):
    return i * o + (o if bias else 0)


def _ssm(c, n, k, c_proj):
    per = c * n + c + c * n + n + c * c + c + ((c * n + n) if c_proj else 0)
    return k * per


def _stem(c, kernel):
    return 2 * c + _linear(c, c) + c * kernel * kernel + c


def _se(c, r):
    return _linear(c, c // r) + _linear(c // r, c)


def _vssm(c, n, kernel):
    return _stem(c, kernel) + _linear(c, c) + _ssm(c, n, 4, True) + _linear(c, c)


def _encoder(cfg: ModelConfig, in_chans: int) -> int:
    widths = cfg.dims.widths
    total = _linear(16 * in_chans, widths[0]) + 2 * widths[0]
    for k, (c, depth) in enumerate(zip(widths, cfg.depths)):
        if k > 0:
            prev = widths[k - 1]
            total += _linear(4 * prev, 2 * prev, bias=False) + 2 * (2 * prev)
        total += depth * _vssm(c, cfg.state, cfg.kernel)
    return total


def count_params(model_or_cfg) -> int:
    """Closed-form trainable scalar count for a configuration."""
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, Model) else model_or_cfg
    c4, n, r, k = cfg.dims.widths[-1], cfg.state, cfg.se_reduction, cfg.kernel
    mode = cfg.fusion_mode
    in_chans = 2 if mode == "early" else 1
    views = 1 if cfg.tie_weights else 2
    total = _encoder(cfg, in_chans) * (views if mode in ("late", "cross") else 1)
    head_in = c4
    if mode == "cross":
        if cfg.use_cvsm:
            per_view = _stem(c4, k) + _ssm(c4, n, 4, True) + _linear(c4, c4)
            total += views * per_view + _se(c4, r)
        if cfg.use_mvcm:
            total += (views + 1) * _stem(c4, k)
            total += views * _ssm(c4, n, 4, False) + _ssm(c4, n, 4, True)
            total += 2 * c4 + _se(c4, r) + _linear(c4, c4)
        elif cfg.mvcm_substitute == "concat":
            head_in = 2 * c4
    return total + _linear(head_in, cfg.num_classes)


def _flops_linear(rows, i, o):
    return 2 * rows * i * o


def _flops_scan(seq, c, n, dirs=4, c_proj=True):
    proj = _flops_linear(seq, c, n) * (2 if c_proj else 1) + _flops_linear(seq, c, c)
    return dirs * (proj + 9 * seq * n * c)


def _flops_stem(hw, c, k):
    return _flops_linear(hw, c, c) + 2 * k * k * hw * c


def flops_breakdown(model_or_cfg, img_size: int | None = None) -> dict[str, int]:
    """Closed-form FLOP tally for one sample, split by component.

    Counted: matmuls (2*M*K*P), depthwise convs (2*k*k*H*W*C) and scans
    (9*L*N*C per direction) plus their selective projections.
    """
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, Model) else model_or_cfg
    img = cfg.img_size if img_size is None else img_size
    widths, sides = cfg.dims.widths, cfg.dims.spatial(img)
    n, k, mode = cfg.state, cfg.kernel, cfg.fusion_mode
    in_chans = 2 if mode == "early" else 1
    enc = _flops_linear(sides[0] ** 2, 16 * in_chans, widths[0])
    for s, (c, depth) in enumerate(zip(widths, cfg.depths)):
        hw = sides[s] ** 2
        if s > 0:
            enc += _flops_linear(hw, 4 * widths[s - 1], c)
        per_block = (_flops_stem(hw, c, k) + _flops_linear(hw, c, c)
                     + _flops_scan(hw, c, n) + _flops_linear(hw, c, c))
        enc += depth * per_block
    n_enc = 2 if mode in ("late", "cross") else 1
    out = {"encoder": n_enc * enc, "fusion": 0, "head": 0}
    c4, hw4 = widths[-1], sides[-1] ** 2
    head_in = c4
    if mode == "cross":
        if cfg.use_cvsm:
            out["fusion"] += 2 * (_flops_stem(hw4, c4, k) + _flops_scan(hw4, c4, n)
                                  + _flops_linear(hw4, c4, c4))
        if cfg.use_mvcm:
            out["fusion"] += 3 * _flops_stem(hw4, c4, k)
            out["fusion"] += 2 * _flops_scan(hw4, c4, n, c_proj=False) + _flops_scan(hw4, c4, n)
            out["fusion"] += _flops_linear(hw4, c4, c4)
        elif cfg.mvcm_substitute == "concat":
            head_in = 2 * c4
    out["head"] = _flops_linear(1, head_in, cfg.num_classes)
    return out


def estimate_flops(model_or_cfg, img_size: int | None = None) -> int:
    return int(sum(flops_breakdown(model_or_cfg, img_size).values()))
