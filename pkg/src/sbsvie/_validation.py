"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numbers

import numpy as np

ALPHA_MARGIN = 1e-6


def check_alpha(alpha) -> float:
    """Return ``alpha`` as a float, rejecting values outside (1/2 + margin, 1)."""
    if isinstance(alpha, bool) or not isinstance(alpha, numbers.Real):
        raise TypeError(f"alpha must be a real number, got {type(alpha).__name__}")
    alpha = float(alpha)
    if not (0.5 + ALPHA_MARGIN < alpha < 1.0):
        raise ValueError(f"alpha must lie in (1/2, 1) with margin {ALPHA_MARGIN}: {alpha}")
    return alpha


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be finite and >= 0, got {value}")
    return value


def check_per_path(values, n_paths: int, name: str = "values") -> np.ndarray:
    """Coerce per-path data to shape ``(M, n)``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be (M,) or (M, n), got shape {arr.shape}")
    if arr.shape[0] != n_paths:
        raise ValueError(f"{name} has {arr.shape[0]} paths, ensemble has {n_paths}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr
