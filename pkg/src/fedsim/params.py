"""Flat parameter-vector algebra and coordinate-wise statistics.

A parameter vector is a one-dimensional ``float64`` numpy array. Model
weights, client updates and aggregates all use this representation so every
aggregator can work on plain arrays.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


class ParamError(ValueError):
    """Raised for malformed or incompatible parameter vectors."""


def as_vector(values) -> np.ndarray:
    """Copy ``values`` into a finite 1-D float64 vector."""
    v = np.array(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ParamError("parameter vector must have positive dimension")
    check_finite(v)
    return v


def check_finite(v: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise ParamError("parameter vector contains NaN or Inf")
    return v


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ParamError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_dims(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a + b
    return check_finite(out)


def subtract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_dims(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a - b
    return check_finite(out)


def scale(a: np.ndarray, c: float) -> np.ndarray:
    if not math.isfinite(c):
        raise ParamError(f"scale factor must be finite, got {c}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * c
    return check_finite(out)


def sq_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance between two vectors."""
    _check_dims(a, b)
    d = a - b
    return float(np.dot(d, d))


def _stack(vs: Sequence[np.ndarray]) -> np.ndarray:
    if len(vs) == 0:
        raise ParamError("cannot aggregate an empty list of vectors")
    dim = vs[0].shape
    for v in vs:
        if v.shape != dim:
            raise ParamError(f"dimension mismatch: {v.shape[0]} vs {dim[0]}")
    return np.stack(vs)


def _sorted_mean(cols: np.ndarray) -> np.ndarray:
    # Columns are pre-sorted, so the summation order does not depend on the
    # order of the inputs. Averaging offsets from the minimum returns identical
    # inputs exactly; the clip absorbs rounding past the extremes.
    lo, hi = cols[0], cols[-1]
    return np.clip(lo + (cols - lo).mean(axis=0), lo, hi)


def coordinate_mean(vs: Sequence[np.ndarray]) -> np.ndarray:
    return _sorted_mean(np.sort(_stack(vs), axis=0))


def coordinate_median(vs: Sequence[np.ndarray]) -> np.ndarray:
    """Per-coordinate median; an even count averages the two middle values."""
    stacked = np.sort(_stack(vs), axis=0)
    n = stacked.shape[0]
    mid = n // 2
    if n % 2 == 1:
        return stacked[mid].copy()
    return _sorted_mean(stacked[mid - 1: mid + 1])


def trim_count(n: int, beta: float) -> int:
    """Number of values dropped from each tail for ``n`` inputs."""
    if not 0.0 <= beta < 0.5:
        raise ParamError(f"trim fraction must lie in [0, 0.5), got {beta}")
    t = math.floor(beta * n)
    if n - 2 * t < 1:
        raise ParamError(f"trimming {t} per side leaves nothing of {n} values")
    return t


def coordinate_trimmed_mean(vs: Sequence[np.ndarray], beta: float) -> np.ndarray:
    """Per-coordinate mean after dropping the ``floor(beta*n)`` extremes on each side."""
    stacked = np.sort(_stack(vs), axis=0)
    t = trim_count(stacked.shape[0], beta)
    return _sorted_mean(stacked[t: stacked.shape[0] - t])
