"""Flat-tensor kernels.

Every piece of model and optimizer state is a 1-D float64 numpy array. The
helpers here validate shape and finiteness so that downstream code can rely
on both without re-checking.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class NonFiniteError(ValueError):
    """Raised when an input or result contains NaN or Inf."""


class DimensionError(ValueError):
    """Raised when tensor lengths disagree."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float64 array (copying only if needed)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise DimensionError(f"{name} must have length >= 1")
    _check_finite(arr, name)
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def hadamard(a, b) -> np.ndarray:
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    _same_length(a, b)
    with np.errstate(over="ignore"):
        out = a * b
    _check_finite(out, "hadamard result")
    return out


def l2_norm(x) -> float:
    x = as_tensor(x, "x")
    # Scale by the max magnitude so that squaring cannot overflow.
    scale = float(np.max(np.abs(x)))
    if scale == 0.0:
        return 0.0
    y = x / scale
    return scale * float(np.sqrt(np.add.reduce(y * y)))


def weighted_mean(tensors: Sequence, weights: Sequence[float]) -> np.ndarray:
    """FedAvg-style mean ``sum(w_n x_n) / sum(w_n)``.

    Accumulation runs over ``tensors`` in the order given, so results are
    reproducible as long as callers pass clients in a fixed order.
    """
    if len(tensors) == 0:
        raise ValueError("weighted_mean needs at least one tensor")
    if len(tensors) != len(weights):
        raise ValueError("tensors and weights differ in length")
    ws = [float(w) for w in weights]
    if any(w < 0 or not np.isfinite(w) for w in ws):
        raise ValueError("weights must be finite and non-negative")
    total = 0.0
    for w in ws:
        total += w
    if total <= 0.0:
        raise ValueError("weights sum to zero")

    first = as_tensor(tensors[0], "tensors[0]")
    acc = np.zeros_like(first)
    for i, (x, w) in enumerate(zip(tensors, ws)):
        x = as_tensor(x, f"tensors[{i}]")
        _same_length(first, x)
        acc += w * x
    out = acc / total
    _check_finite(out, "weighted_mean result")
    return out


def adam_direction(m, v, eps: float) -> np.ndarray:
    """Per-coordinate step direction ``m / sqrt(v + eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    m = as_tensor(m, "m")
    v = as_tensor(v, "v")
    _same_length(m, v)
    if np.any(v < 0):
        raise ValueError("second moment has negative entries")
    out = m / np.sqrt(v + eps)
    _check_finite(out, "adam_direction result")
    return out
