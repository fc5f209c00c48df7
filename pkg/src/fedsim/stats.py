"""Run statistics: medians, the Mann-Whitney U test and backdoor-task accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedsim.data import Dataset
from fedsim.model import MlpModel, predict


# Tie-free samples at most this large get an exact p-value.
EXACT_MAX_SIZE = 8


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSample:
    label: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_value: float


def median_of(values: Sequence[float]) -> float:
    vals = sorted(float(v) for v in values)
    if not vals:
        raise StatsError("median of an empty sequence")
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    return (vals[mid - 1] + vals[mid]) / 2.0


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0])
    sx = x[order]
    i = 0
    while i < sx.shape[0]:
        j = i
        while j + 1 < sx.shape[0] and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks: np.ndarray, n1: int) -> float:
    """Two-sided permutation p-value of the rank sum of the first ``n1`` ranks.

    Counts every way to pick ``n1`` of the pooled midranks, so ties are
    handled exactly. Midranks are halves, so doubled ranks are integers.
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    # ways[k, s]: number of k-subsets whose doubled rank sum is s.
    ways = np.zeros((n1 + 1, total + 1), dtype=np.int64)
    ways[0, 0] = 1
    for r in r2:
        ways[1:, r:] += ways[:-1, : total + 1 - r].copy()
    mean = n1 * total / r2.shape[0]
    dev = abs(int(r2[:n1].sum()) - mean)
    sums = np.arange(total + 1)
    extreme = ways[n1][np.abs(sums - mean) >= dev - 1e-9].sum()
    return min(1.0, float(extreme) / float(ways[n1].sum()))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test.

    ``u`` counts the pairs ``(x, y)`` with ``x`` from ``a`` greater than ``y``
    from ``b``, ties counting one half. When neither sample exceeds
    ``EXACT_MAX_SIZE`` values the p-value is the exact permutation p given the
    observed ties; otherwise it comes from the normal approximation with
    tie-corrected variance and a 0.5 continuity correction.
    """
    n1, n2 = len(a), len(b)
    if n1 < 3 or n2 < 3:
        raise StatsError("Mann-Whitney U needs at least three values per sample")
    pooled = np.concatenate([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)])
    ranks = midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)

    n = n1 + n2
    _, tie_sizes = np.unique(pooled, return_counts=True)
    if max(n1, n2) <= EXACT_MAX_SIZE:
        return MannWhitneyResult(u, _exact_p(ranks, n1))
    tie_term = float(((tie_sizes ** 3) - tie_sizes).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u, 1.0)
    mean = n1 * n2 / 2.0
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    return MannWhitneyResult(u, min(1.0, math.erfc(z / math.sqrt(2.0))))


def backdoor_accuracy(model: MlpModel, test: Dataset, pattern, target: int) -> float:
    """Share of stamped non-target test examples that the model assigns to ``target``."""
    keep = test.labels != target
    if not np.any(keep):
        raise StatsError("no test examples outside the backdoor target class")
    stamped = pattern.apply(test.features[keep])
    return float(np.mean(predict(model, stamped) == target))
