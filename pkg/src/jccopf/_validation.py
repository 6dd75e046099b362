"""Argument checks shared by the estimators and pipeline stages."""

from __future__ import annotations

import numpy as np


def check_probability(value: float, name: str, *, upper: float = 1.0, closed_upper: bool = False) -> float:
    value = float(value)
    ok = 0.0 < value <= upper if closed_upper else 0.0 < value < upper
    if not ok:
        bracket = "]" if closed_upper else ")"
        raise ValueError(f"{name} must lie in (0, {upper}{bracket}, got {value}")
    return value


def check_positive_int(value: int, name: str) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return int(value)


def check_vector(v, n: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != n:
        raise ValueError(f"{name} has length {v.size}, expected {n}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v
