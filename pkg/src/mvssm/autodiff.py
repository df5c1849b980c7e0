"""Define-by-run reverse-mode differentiation.

Every differentiable op is declared once with :func:`defop`, which insists
on both a forward and a backward rule. Calling :func:`record` evaluates the
forward rule and, when a :class:`Tape` is active, appends a node to it.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable

import numpy as np

from .errors import ContractError, NumericError, OpRegistrationError
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class OpRule:
    name: str
    forward: Callable
    backward: Callable


RULES: dict[str, OpRule] = {}

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


def defop(name: str):
    """Class decorator registering ``forward(ctx, *arrays, **attrs)`` and
    ``backward(ctx, grad) -> tuple`` under ``name``.

    A missing backward is an error at declaration time, so no op can ever
    contribute a silent zero gradient.
    """

    def wrap(cls):
        fwd = getattr(cls, "forward", None)
        bwd = getattr(cls, "backward", None)
        if fwd is None:
            raise OpRegistrationError(f"op '{name}' has no forward rule")
        if bwd is None:
            raise OpRegistrationError(f"op '{name}' has no backward rule")
        if name in RULES:
            raise OpRegistrationError(f"op '{name}' registered twice")
        RULES[name] = OpRule(name, fwd, bwd)
        return cls

    return wrap


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    ctx: SimpleNamespace
    input_shapes: tuple[tuple[int, ...], ...]


@dataclass
class Tape:
    """Ordered record of executed ops. Use as a context manager."""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, *inputs, **attrs) -> Tensor:
        token = _active_tape.set(self)
        try:
            return record(op, *inputs, **attrs)
        finally:
            _active_tape.reset(token)


def active_tape() -> Tape | None:
    return _active_tape.get()


def record(op: str, *inputs, **attrs) -> Tensor:
    """Run ``op`` forward on ``inputs``; append a node if a tape is active."""
    rule = RULES[op]
    like = next((x for x in inputs if isinstance(x, Tensor)), None)
    tensors = [as_tensor(x, like) for x in inputs]
    ctx = SimpleNamespace()
    out = rule.forward(ctx, *[t.data for t in tensors], **attrs)
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite value produced by op '{op}'")
    result = Tensor(out)
    tape = _active_tape.get()
    if tape is not None:
        tape.nodes.append(
            Node(op, tuple(t.id for t in tensors), result.id, ctx,
                 tuple(t.shape for t in tensors))
        )
    return result


class GradMap(dict):
    """Value id -> gradient array. Absent entries mean zero gradient."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t.id)
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, key) -> bool:
        return super().__contains__(key.id if isinstance(key, Tensor) else key)

    def __getitem__(self, key):
        return super().__getitem__(key.id if isinstance(key, Tensor) else key)


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse-mode sweep seeded with d(loss)/d(loss) = 1."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.output == loss.id for node in tape.nodes):
        raise ContractError("loss was not produced on this tape")
    grads = GradMap({loss.id: np.ones_like(loss.data)})
    for node in reversed(tape.nodes):
        g = dict.get(grads, node.output)
        if g is None:
            continue
        in_grads = RULES[node.op].backward(node.ctx, g)
        if len(in_grads) != len(node.inputs):
            raise ContractError(f"backward of '{node.op}' returned {len(in_grads)} grads "
                                f"for {len(node.inputs)} inputs")
        for vid, gi, shape in zip(node.inputs, in_grads, node.input_shapes):
            if gi is None:
                continue
            if gi.shape != shape:
                raise ContractError(f"backward of '{node.op}' produced grad shape "
                                    f"{gi.shape} for input of shape {shape}")
            prev = dict.get(grads, vid)
            dict.__setitem__(grads, vid, gi if prev is None else prev + gi)
    return grads


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_checked: int
    analytic: float = 0.0
    numeric: float = 0.0

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "worst_param": self.worst_param,
            "worst_index": list(self.worst_index),
            "n_checked": self.n_checked,
            "analytic": self.analytic,
            "numeric": self.numeric,
        }


def gradcheck(fn: Callable[[], Tensor], params, eps: float = 1e-6,
              max_coords: int | None = None, seed: int = 0,
              floor: float = 0.0) -> GradcheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``params`` is a mapping name -> Tensor (or a sequence of tensors). Each
    parameter's data is perturbed in place and restored. With
    ``max_coords`` set, that many coordinates per parameter are drawn
    deterministically from ``seed``.

    The error is ``|a - n| / (|a| + |n| + 1e-12)``. A positive ``floor`` adds
    ``floor * max(1, |f|)`` to the denominator: central differences cannot
    resolve gradients much below ``1e-16 * |f| / eps``, and on large models
    such coordinates would otherwise read as total mismatches.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if not isinstance(params, dict):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"gradcheck needs float64 parameters; '{name}' is {p.dtype}")

    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    denom_floor = 1e-12 + floor * max(1.0, abs(float(loss.data.reshape(-1)[0])))

    rng = np.random.default_rng(seed)
    worst = GradcheckReport(0.0, "", (), 0)
    n_checked = 0
    for name, p in params.items():
        analytic = grads.of(p)
        flat = p.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat.size)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = float(fn().data.reshape(-1)[0])
            flat[k] = orig - eps
            f_minus = float(fn().data.reshape(-1)[0])
            flat[k] = orig
            num = (f_plus - f_minus) / (2 * eps)
            ana = float(analytic.reshape(-1)[k])
            rel = abs(ana - num) / (abs(ana) + abs(num) + denom_floor)
            n_checked += 1
            if rel > worst.max_rel_err or not worst.worst_param:
                idx = tuple(int(i) for i in np.unravel_index(k, p.shape))
                worst = GradcheckReport(rel, name, idx, 0, ana, num)
    worst.n_checked = n_checked
    return worst
