"""Input validation helpers shared by the estimator, harness and CLI."""

from __future__ import annotations

import math
from numbers import Integral, Real

import numpy as np

from .scenegen import Dataset


def check_pose_array(X, name: str = "poses") -> np.ndarray:
    """``(n, 3)`` finite float64 array of ``(x, y, theta)`` rows."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_dataset(X, name: str = "X", allow_empty: bool = False) -> Dataset:
    if not isinstance(X, Dataset):
        raise TypeError(f"{name} must be a crossview_pid Dataset, got {type(X).__name__}")
    if not allow_empty and len(X) == 0:
        raise ValueError(f"{name} is empty")
    return X


def check_noise_radii(radii, name: str = "noise radii") -> tuple[float, float, float]:
    vals = tuple(float(r) for r in np.asarray(radii, dtype=np.float64).reshape(-1))
    if len(vals) != 3:
        raise ValueError(f"{name} need three components (m, m, rad), got {len(vals)}")
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise ValueError(f"{name} must be finite and non-negative, got {vals}")
    return vals


def check_int(value, name: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, Real) or not math.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value
