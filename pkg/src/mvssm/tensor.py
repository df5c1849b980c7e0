"""Dense row-major tensors backed by numpy.

Only two dtypes exist: float32 (default) and float64 (used for gradient
checking). Feature maps are channels-last ``(B, H, W, C)``.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float32
DTYPES = (np.float32, np.float64)
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_ids = itertools.count(1)


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(DEFAULT_DTYPE)
    dt = np.dtype(dtype)
    if dt not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """A value carrier with a unique id, used as a tape handle.

    ``data`` is a contiguous numpy array. Ops never mutate their inputs;
    only the optimizer writes to parameter data in place.
    """

    __slots__ = ("data", "id", "name")

    def __init__(self, data, dtype=None, name: str | None = None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in DTYPE_CODES:
            arr = np.ascontiguousarray(data)
        else:
            arr = np.ascontiguousarray(data, dtype=resolve_dtype(dtype))
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar; the differentiable definitions live in ``ops``
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()


def _not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap arrays and python scalars; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    if isinstance(value, np.ndarray) and dtype is None and value.dtype not in DTYPE_CODES:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)
