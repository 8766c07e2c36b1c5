"""Dense array helpers used by every layer kernel.

Tensors are plain ``numpy.ndarray`` objects laid out row-major, with image
batches in N x H x W x C order. This module adds the few guarantees the rest
of the package relies on: explicit precision modes, finiteness checks and
shape-checked primitives.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

#: Precision used for training.
TRAIN_DTYPE = np.float32
#: Precision used for finite-difference checks and tests.
CHECK_DTYPE = np.float64

_PRECISIONS = {
    "float32": np.float32,
    "f32": np.float32,
    "32": np.float32,
    "float64": np.float64,
    "f64": np.float64,
    "64": np.float64,
}


def resolve_dtype(precision) -> np.dtype:
    """Map a precision name (``"float32"``, ``"f64"``...) or dtype to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(_PRECISIONS[precision.lower()])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}")
    return dt


def as_tensor(data, precision=TRAIN_DTYPE) -> np.ndarray:
    """Copy ``data`` into a contiguous, finite array of the requested precision."""
    arr = np.array(data, dtype=resolve_dtype(precision), order="C", copy=True)
    return check_finite(arr)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{what} contains {bad} non-finite value(s)")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of an M x K and a K x N array.

    Results are reproducible run to run for identical inputs: the BLAS
    kernel is fixed for a given shape and the package never changes thread
    counts between calls.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def pad2d(x: np.ndarray, top: int, bottom: int, left: int, right: int, value: float = 0.0) -> np.ndarray:
    """Pad the two spatial axes of an N x H x W x C batch with a constant."""
    if x.ndim != 4:
        raise DimensionError(f"pad2d expects a rank-4 N x H x W x C tensor, got shape {x.shape}")
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad amounts must be non-negative")
    if top == bottom == left == right == 0:
        return x.copy()
    return np.pad(
        x,
        ((0, 0), (top, bottom), (left, right), (0, 0)),
        mode="constant",
        constant_values=value,
    )


def reshape(x: np.ndarray, shape) -> np.ndarray:
    """Reinterpret ``x`` with a new shape; the element order never changes."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    return np.ascontiguousarray(x).reshape(shape)


def flatten(x: np.ndarray) -> np.ndarray:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
