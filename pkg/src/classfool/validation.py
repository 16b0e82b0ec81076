"""Input validation helpers used by estimators and IO routines."""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError, ValidationError


def check_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a non-empty 2-d float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"{name} must be a 2-d array, got ndim={X.ndim}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {X.shape}")
    return X


def check_vector(v, size: int | None = None, name: str = "v") -> np.ndarray:
    """Coerce to a 1-d float64 array, optionally of a fixed size."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be a 1-d array, got ndim={v.ndim}")
    if size is not None and v.size != size:
        raise ShapeError(f"{name} must have size {size}, got {v.size}")
    return v


def check_labels(y, n_rows: int, n_classes: int | None = None,
                 name: str = "labels") -> np.ndarray:
    """Coerce to int64 class indices and bounds-check them.

    Out-of-range indices raise IndexError so callers can distinguish a bad
    label from a malformed array.
    """
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"{name} must be a 1-d array, got ndim={y.ndim}")
    if y.shape[0] != n_rows:
        raise ShapeError(f"{name} must have length {n_rows}, got {y.shape[0]}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        as_int = y.astype(np.int64)
        if not np.array_equal(as_int, y):
            raise ValidationError(f"{name} must contain integer class indices")
        y = as_int
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise IndexError(f"{name} contains a negative class index")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise IndexError(
            f"{name} contains index {int(y.max())} but only {n_classes} classes exist")
    return y


def check_label(label, n_classes: int, name: str = "label") -> int:
    """Bounds-check a single class index."""
    label = int(label)
    if not 0 <= label < n_classes:
        raise IndexError(f"{name} {label} out of range for {n_classes} classes")
    return label


def check_value_range(value_range) -> tuple[float, float]:
    lo, hi = float(value_range[0]), float(value_range[1])
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValidationError("value_range must be finite")
    if lo >= hi:
        raise ValidationError(f"value_range must satisfy lo < hi, got ({lo}, {hi})")
    return lo, hi


def require(condition: bool, message: str, exc=ValidationError) -> None:
    if not condition:
        raise exc(message)
