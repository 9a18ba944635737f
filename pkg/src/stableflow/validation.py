"""Small input-validation helpers shared by the public surfaces."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, ValidationError

__all__ = ["check_vector", "check_matrix", "check_finite", "check_positive"]


def check_vector(x, dim: int, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (dim,):
        raise DimensionError(f"{name} must have shape ({dim},), got {arr.shape}")
    check_finite(arr, name)
    return arr


def check_matrix(x, cols: int, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != cols:
        raise DimensionError(f"{name} must have shape (n, {cols}), got {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "x") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")


def check_positive(value, name: str = "value") -> float:
    value = float(value)
    if value <= 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    return value
