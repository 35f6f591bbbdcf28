"""Input validation helpers shared by all modules.

Conversions happen at module boundaries: every public function funnels its
array arguments through these helpers, so the numerical code below can assume
contiguous float64 input of the right shape.
"""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str = "array") -> np.ndarray:
    """Convert to a float64 ndarray, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_points(x, name: str = "points", allow_empty: bool = False) -> np.ndarray:
    """Validate an (N, 3) coordinate array in meters."""
    arr = as_float_array(x, name)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] == 0 and not allow_empty:
        raise ValueError(f"{name} must contain at least one point")
    return np.ascontiguousarray(arr)


def check_vector(x, name: str = "vector") -> np.ndarray:
    """Validate a finite 3-vector."""
    arr = as_float_array(x, name).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {arr.shape}")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_matrix(x, shape: tuple[int, int], name: str = "matrix") -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def check_index_array(x, size: int, name: str = "indices") -> np.ndarray:
    """Validate integer indices into an array of length ``size``."""
    arr = np.asarray(x)
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and np.all(arr == arr.astype(np.int64)):
            arr = arr.astype(np.int64)
        else:
            raise ValueError(f"{name} must be integers")
    arr = arr.astype(np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= size):
        raise ValueError(f"{name} out of bounds for size {size}")
    return arr


def readonly(arr: np.ndarray) -> np.ndarray:
    """Return an array flagged read-only (value types are immutable)."""
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr
