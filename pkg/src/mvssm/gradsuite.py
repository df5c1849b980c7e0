"""Finite-difference gradient checks at op, block and model granularity.

Every case reduces its output to a scalar through fixed random weights, so
no coordinate of the gradient is structurally zero and every op's backward
rule is exercised in full. All cases run in float64.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .autodiff import RULES, GradcheckReport, gradcheck
from .blocks import VssmBlock
from .fusion import CvsmBlock, MvcmBlock
from .module import Init, Module
from .ssm import STRATEGIES, scan_core
from .tensor import Parameter, Tensor

THRESHOLDS = {"op": 1e-4, "block": 1e-4, "model": 1e-3}
# float64 central-difference roundoff (~1e-10 |f| at eps=1e-6) over the op threshold
MODEL_FLOOR = 1e-6
F64 = np.float64


@dataclass
class CheckRecord:
    op: str
    variant: str
    report: GradcheckReport
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.report.max_rel_err <= self.threshold)

    def to_dict(self) -> dict:
        return {"op": self.op, "variant": self.variant, "passed": self.passed,
                "threshold": self.threshold, "seconds": round(self.seconds, 3),
                **self.report.to_dict()}


@dataclass
class SuiteReport:
    scope: str
    records: list[CheckRecord] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    @property
    def worst(self) -> CheckRecord:
        return max(self.records, key=lambda r: r.report.max_rel_err / r.threshold)

    def to_dict(self) -> dict:
        w = self.worst
        return {"scope": self.scope, "passed": self.passed,
                "worst_op": w.op, "worst_variant": w.variant,
                "worst_max_rel_err": w.report.max_rel_err,
                "records": [r.to_dict() for r in self.records]}


def _p(rng, *shape, scale=1.0, shift=0.0) -> Parameter:
    return Parameter(rng.standard_normal(shape) * scale + shift, dtype=F64)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.standard_normal(out.shape), dtype=F64)
    return lambda y: ops.sum(ops.mul(y, w))


def _case(rng, build: Callable[[dict], Tensor], params: dict):
    """Wrap ``build(params) -> Tensor`` into a scalar loss with fixed weights."""
    proj = _project(build(params), rng)
    return (lambda: proj(build(params))), params


def _away_from_zero(rng, *shape, margin=0.2):
    x = rng.uniform(margin, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return Parameter(x, dtype=F64)


def _op_cases(rng) -> dict[str, Callable]:
    """name -> factory returning (fn, params). Keys match registered op names."""

    def unary(name, fn, x):
        return name, lambda: _case(rng, lambda p: fn(p["x"]), {"x": x})

    cases = dict([
        unary("neg", ops.neg, _p(rng, 3, 4)),
        unary("exp", ops.exp, _p(rng, 3, 4)),
        unary("log", ops.log, Parameter(rng.uniform(0.5, 2.0, (3, 4)), dtype=F64)),
        unary("sigmoid", ops.sigmoid, _p(rng, 3, 4, scale=2)),
        unary("silu", ops.silu, _p(rng, 16)),
        unary("softplus", ops.softplus, _p(rng, 3, 4, scale=2)),
        unary("relu", ops.relu, _away_from_zero(rng, 3, 4)),
        unary("softmax", lambda x: ops.softmax(x, axis=-1), _p(rng, 3, 5)),
        unary("log_softmax", lambda x: ops.log_softmax(x, axis=-1), _p(rng, 3, 5)),
        unary("sum", lambda x: ops.sum(x, axis=1, keepdims=True), _p(rng, 3, 4, 2)),
        unary("mean", lambda x: ops.mean(x, axis=(0, 2)), _p(rng, 3, 4, 2)),
        unary("global_avg_pool", ops.global_avg_pool, _p(rng, 2, 3, 4, 5)),
        unary("reshape", lambda x: ops.reshape(x, (4, 6)), _p(rng, 2, 3, 4)),
        unary("transpose", lambda x: ops.transpose(x, (2, 0, 1)), _p(rng, 2, 3, 4)),
        unary("flip", lambda x: ops.flip(x, 1), _p(rng, 2, 3, 4)),
        unary("take", lambda x: ops.take(x, 1, axis=1), _p(rng, 2, 3, 4)),
    ])

    def binary(name, fn, a, b):
        cases[name] = lambda: _case(rng, lambda p: fn(p["a"], p["b"]), {"a": a, "b": b})

    binary("add", ops.add, _p(rng, 3, 4), _p(rng, 4))
    binary("sub", ops.sub, _p(rng, 3, 1), _p(rng, 3, 4))
    binary("mul", ops.mul, _p(rng, 3, 4), _p(rng, 1, 4))
    binary("div", ops.div, _p(rng, 3, 4), Parameter(rng.uniform(0.5, 2.0, (3, 4)), dtype=F64))
    binary("matmul", ops.matmul, _p(rng, 2, 3, 4), _p(rng, 4, 5))
    binary("stack", lambda a, b: ops.stack([a, b], axis=1), _p(rng, 3, 4), _p(rng, 3, 4))
    binary("concat", lambda a, b: ops.concat([a, b], axis=-1), _p(rng, 3, 2), _p(rng, 3, 4))
    mask = np.array([True, False, True, True, False])
    binary("channel_select", lambda a, b: ops.channel_select(a, b, mask),
           _p(rng, 2, 5), _p(rng, 2, 5))
    binary("dwconv2d", ops.dwconv2d, _p(rng, 2, 5, 4, 3), _p(rng, 3, 3, 3))
    targets = Tensor((rng.uniform(size=(4, 3)) > 0.5).astype(F64), dtype=F64)
    cases["bce_with_logits"] = lambda: _case(
        rng, lambda p: ops.bce_with_logits(p["logits"], targets),
        {"logits": _p(rng, 4, 3, scale=2)})
    cases["layernorm"] = lambda: _case(
        rng, lambda p: ops.layernorm(p["x"], p["gamma"], p["beta"]),
        {"x": _p(rng, 3, 6), "gamma": _p(rng, 6, shift=1.0), "beta": _p(rng, 6)})
    return cases


def _scan_case(rng, strategy: str):
    L, C, N = 9, 3, 4
    params = {
        "u": _p(rng, 2, L, C),
        "delta": Parameter(rng.uniform(0.05, 1.0, (2, L, C)), dtype=F64),
        "A": Parameter(-rng.uniform(0.2, 2.0, (C, N)), dtype=F64),
        "B": _p(rng, 2, L, N),
        "C": _p(rng, 2, L, N),
        "D": _p(rng, C),
    }
    return _case(rng, lambda p: scan_core(p["u"], p["delta"], p["A"], p["B"], p["C"], p["D"],
                                          strategy=strategy, chunk=4), params)


def _timed(op, variant, threshold, factory, max_coords=None, floor=0.0) -> CheckRecord:
    t0 = time.perf_counter()
    fn, params = factory()
    rep = gradcheck(fn, params, max_coords=max_coords, floor=floor)
    return CheckRecord(op, variant, rep, threshold, time.perf_counter() - t0)


def op_suite(seed: int = 0) -> SuiteReport:
    """One record per registered op; the selective scan once per strategy."""
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    report = SuiteReport("op")
    thr = THRESHOLDS["op"]
    for name in sorted(RULES):
        if name == "selective_scan":
            for strategy in STRATEGIES:
                report.records.append(
                    _timed(name, strategy, thr, lambda s=strategy: _scan_case(rng, s)))
        elif name in cases:
            report.records.append(_timed(name, "", thr, cases[name]))
        else:
            report.records.append(CheckRecord(
                name, "missing", GradcheckReport(float("inf"), "", (), 0), thr, 0.0))
    return report


def randomize(module: Module, seed: int, std: float = 0.3) -> None:
    """Jitter every parameter so zero-initialized paths carry gradient."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data[...] = p.data + rng.standard_normal(p.shape) * std


def _module_case(rng, module: Module, build: Callable[[], Tensor]):
    params = dict(module.named_parameters())
    proj = _project(build(), rng)
    return (lambda: proj(build())), params


def block_suite(seed: int = 0, strategy: str = "sequential", max_coords: int = 6) -> SuiteReport:
    rng = np.random.default_rng(seed)
    init = Init(seed, dtype=F64)
    thr = THRESHOLDS["block"]
    report = SuiteReport("block")

    def x(*shape):
        return Tensor(rng.standard_normal(shape), dtype=F64)

    vssm = VssmBlock(4, 3, init, strategy=strategy)
    randomize(vssm, seed)
    xv = x(1, 4, 4, 4)
    report.records.append(_timed("vssm_block", strategy, thr,
                                 lambda: _module_case(rng, vssm, lambda: vssm(xv)), max_coords))

    cvsm = CvsmBlock(4, 3, init, reduction=2, strategy=strategy)
    randomize(cvsm, seed + 1)
    c1, c2 = x(2, 8, 8, 4), x(2, 8, 8, 4)

    def run_cvsm():
        a, b = cvsm(c1, c2)
        return ops.concat([a, b], axis=-1)

    report.records.append(_timed("cvsm_block", strategy, thr,
                                 lambda: _module_case(rng, cvsm, run_cvsm), max_coords))

    mvcm = MvcmBlock(4, 3, init, reduction=2, strategy=strategy)
    randomize(mvcm, seed + 2)
    m1, m2 = x(2, 8, 8, 4), x(2, 8, 8, 4)
    report.records.append(_timed("mvcm_block", strategy, thr,
                                 lambda: _module_case(rng, mvcm, lambda: mvcm(m1, m2)),
                                 max_coords))
    return report


def model_suite(seed: int = 0, fusion_mode: str = "cross", max_coords: int = 2) -> SuiteReport:
    from .model import ModelConfig, build
    from .train import cross_entropy

    cfg = ModelConfig(fusion_mode=fusion_mode, dtype="float64", seed=seed,
                      scan_strategy="fused")
    model = build(cfg)
    randomize(model, seed, std=0.05)
    rng = np.random.default_rng(seed)
    v1 = rng.standard_normal((1, cfg.img_size, cfg.img_size, 1))
    v2 = rng.standard_normal((1, cfg.img_size, cfg.img_size, 1))
    label = np.array([1])
    params = dict(model.named_parameters())
    rep = SuiteReport("model")
    rep.records.append(_timed(
        "model", fusion_mode, THRESHOLDS["model"],
        lambda: ((lambda: cross_entropy(model.logits(v1, v2), label)), params), max_coords,
        floor=MODEL_FLOOR))
    return rep


def run_suite(scope: str, seed: int = 0) -> SuiteReport:
    if scope == "op":
        return op_suite(seed)
    if scope == "block":
        return block_suite(seed)
    if scope == "model":
        return model_suite(seed)
    raise ValueError(f"unknown scope {scope!r}")
