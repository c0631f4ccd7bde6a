"""Input validation helpers.

Small check functions raising :class:`~retrack.exceptions.ValidationError`
subtypes; used at the public entry points so the numeric kernels can assume
clean inputs.
"""

from __future__ import annotations

import numpy as np

from .exceptions import (
    ResolutionMismatchError,
    SequenceMismatchError,
    ValidationError,
)


def check_grid(a, name: str = "grid") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValidationError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("prediction", "target")) -> None:
    if a.shape != b.shape:
        raise ResolutionMismatchError(
            f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}"
        )


def check_same_length(a, b, names=("predictions", "targets")) -> None:
    if len(a) != len(b):
        raise SequenceMismatchError(
            f"{names[0]} has {len(a)} frames, {names[1]} has {len(b)}"
        )


def check_unit_range(arr: np.ndarray, name: str = "grid") -> None:
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1], got [{lo}, {hi}]")


def check_positive(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v <= 0:
        raise ValidationError(f"{name} must be a positive finite number, got {value!r}")
    return v


def check_non_negative(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v < 0:
        raise ValidationError(f"{name} must be a non-negative finite number, got {value!r}")
    return v


def check_probability(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or not 0.0 <= v <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
    return v


def check_odd(value, name: str) -> int:
    v = int(value)
    if v <= 0 or v % 2 == 0:
        raise ValidationError(f"{name} must be a positive odd integer, got {value!r}")
    return v


def check_index(value, n: int, name: str = "index") -> int:
    v = int(value)
    if not 0 <= v < n:
        raise ValidationError(f"{name} {value!r} out of range [0, {n})")
    return v
