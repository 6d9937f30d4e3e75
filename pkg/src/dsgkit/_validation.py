"""Argument checks shared by the estimators and free functions."""
from __future__ import annotations

import numbers

import numpy as np


def check_positive(value, name: str, allow_zero: bool = False) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
    return float(value)


def check_probability(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
    return float(value)


def check_points(points, name: str = "points", allow_empty: bool = True) -> np.ndarray:
    """Return ``points`` as a float (N, 3) array."""
    p = np.asarray(points, dtype=float)
    if p.size == 0:
        if not allow_empty:
            raise ValueError(f"{name} must not be empty")
        return p.reshape(0, 3)
    if p.ndim == 1 and p.shape[0] == 3:
        p = p.reshape(1, 3)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} contains non-finite values")
    return p


def check_point(point, name: str = "point") -> np.ndarray:
    p = np.asarray(point, dtype=float).reshape(-1)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be a finite 3-vector")
    return p
