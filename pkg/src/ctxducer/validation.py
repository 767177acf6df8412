"""Input validation helpers used by the estimators and file readers."""

from __future__ import annotations

import os

import numpy as np

from .exceptions import NotFiniteError, ShapeError


def as_float_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NotFiniteError(f"{name} contains NaN or Inf")
    return arr


def as_int_vector(x, name: str = "ids") -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(arr, dtype=np.float64)):
            raise ShapeError(f"{name} must be integer-valued")
        arr = rounded
    return arr.astype(np.int64)


def check_same_length(a, b, name_a: str = "a", name_b: str = "b") -> None:
    if len(a) != len(b):
        raise ShapeError(f"{name_a} and {name_b} must have equal length ({len(a)} != {len(b)})")


def worker_count() -> int:
    """Worker cap from CTXDUCER_THREADS; defaults to 1 (deterministic mode)."""
    raw = os.environ.get("CTXDUCER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
