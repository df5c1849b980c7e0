"""Parameter containers and deterministic initialization."""
from __future__ import annotations

import numpy as np

from .tensor import Parameter, resolve_dtype


class Init:
    """Seeded parameter factory shared by all blocks of one model build."""

    def __init__(self, seed: int = 0, dtype=None, std: float = 0.02):
        self.rng = np.random.default_rng(seed)
        self.dtype = resolve_dtype(dtype)
        self.std = std

    def trunc_normal(self, *shape, std: float | None = None) -> Parameter:
        # redraw anything beyond two standard deviations
        std = self.std if std is None else std
        out = self.rng.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return Parameter((out * std).astype(self.dtype))

    def zeros(self, *shape) -> Parameter:
        return Parameter(np.zeros(shape, dtype=self.dtype))

    def ones(self, *shape) -> Parameter:
        return Parameter(np.ones(shape, dtype=self.dtype))

    def array(self, values) -> Parameter:
        return Parameter(np.array(values, dtype=self.dtype))


class Module:
    """Walks attributes in definition order to find parameters.

    Parameters shared between modules (weight tying) are reported once,
    under the first name they are reached by.
    """

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        self._collect("", out, set())
        return out

    def _collect(self, prefix, out, seen):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if value.id not in seen:
                    seen.add(value.id)
                    out.append((name, value))
            elif isinstance(value, Module):
                value._collect(name + ".", out, seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{name}.{i}.", out, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr.astype(p.dtype, copy=False)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))
