"""Server-side aggregation rules.

Each rule maps a list of :class:`ClientUpdate` to one update vector. Inputs
are put in ``client_id`` order first, so every rule is invariant to the order
in which updates arrive.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from fedsim import params
from fedsim.data import Dataset
from fedsim.model import MlpModel, evaluate

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


class KrumPreconditionError(AggregationError):
    """Too few updates for the assumed number of byzantine clients."""


class AggregatorKind(str, enum.Enum):
    FEDAVG = "fedavg"
    KRUM = "krum"
    MEDIAN = "median"
    TRIMMED_MEAN = "trimmed_mean"
    ENSEMBLE = "ensemble"


# Ensemble tie-break order: earlier wins.
ENSEMBLE_PRECEDENCE = (
    AggregatorKind.FEDAVG,
    AggregatorKind.MEDIAN,
    AggregatorKind.TRIMMED_MEAN,
    AggregatorKind.KRUM,
)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    update: np.ndarray
    num_samples: int

    def __post_init__(self):
        if self.num_samples < 1:
            raise AggregationError(f"client {self.client_id}: num_samples must be at least 1")


@dataclass(frozen=True)
class AggregatorSpec:
    """Aggregator choice plus its hyperparameters.

    ``f`` is the byzantine count Krum assumes and ``beta`` the per-side trim
    fraction of the trimmed mean. ``None`` means "derive from the threat
    configuration" and must be resolved before aggregating.
    """

    kind: AggregatorKind = AggregatorKind.FEDAVG
    f: Optional[int] = None
    beta: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AggregatorKind(self.kind))
        if self.f is not None and self.f < 0:
            raise AggregationError("f must be non-negative")
        if self.beta is not None and not 0.0 <= self.beta < 0.5:
            raise AggregationError("beta must lie in [0, 0.5)")


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if len(updates) == 0:
        raise AggregationError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    dim = ordered[0].update.shape
    if any(u.update.shape != dim for u in ordered):
        raise AggregationError("updates have different dimensions")
    return ordered


def fed_avg(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sample-count weighted mean of the updates."""
    ordered = _ordered(updates)
    counts = np.array([u.num_samples for u in ordered], dtype=np.float64)
    vectors = [u.update for u in ordered]
    if np.all(counts == counts[0]):
        return params.coordinate_mean(vectors)
    weights = counts / counts.sum()
    out = np.zeros_like(vectors[0])
    for w, v in zip(weights, vectors):
        out += w * v
    return params.check_finite(out)


def krum_scores(updates: Sequence[ClientUpdate], f: int) -> tuple[list[ClientUpdate], np.ndarray]:
    """Client-id-ordered updates and their Krum scores."""
    ordered = _ordered(updates)
    n = len(ordered)
    k = n - f - 2
    if k < 1:
        raise KrumPreconditionError(f"Krum needs n - f - 2 >= 1, got n={n}, f={f}")
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = params.sq_distance(ordered[i].update, ordered[j].update)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(dist[i], i))
        scores[i] = others[:k].sum()
    return ordered, scores


def krum(updates: Sequence[ClientUpdate], f: int) -> np.ndarray:
    """Return the update whose ``n - f - 2`` nearest neighbours are closest.

    Distances are squared Euclidean. On equal scores the lowest client id wins.
    """
    ordered, scores = krum_scores(updates, f)
    return ordered[int(np.argmin(scores))].update.copy()


def median_agg(updates: Sequence[ClientUpdate]) -> np.ndarray:
    return params.coordinate_median([u.update for u in _ordered(updates)])


def trimmed_mean_agg(updates: Sequence[ClientUpdate], beta: float) -> np.ndarray:
    return params.coordinate_trimmed_mean([u.update for u in _ordered(updates)], beta)


def _require(value, name: str):
    if value is None:
        raise AggregationError(f"aggregator parameter {name!r} was not resolved")
    return value


def aggregate_single(kind: AggregatorKind, updates: Sequence[ClientUpdate], spec: AggregatorSpec) -> np.ndarray:
    if kind is AggregatorKind.FEDAVG:
        return fed_avg(updates)
    if kind is AggregatorKind.KRUM:
        return krum(updates, _require(spec.f, "f"))
    if kind is AggregatorKind.MEDIAN:
        return median_agg(updates)
    if kind is AggregatorKind.TRIMMED_MEAN:
        return trimmed_mean_agg(updates, _require(spec.beta, "beta"))
    raise AggregationError(f"{kind.value} is not a single aggregator")


@dataclass(frozen=True)
class Candidate:
    kind: AggregatorKind
    update: Optional[np.ndarray]
    accuracy: Optional[float]
    skipped: Optional[str] = None


def ensemble_candidates(
    updates: Sequence[ClientUpdate], global_model: MlpModel, validation: Dataset, spec: AggregatorSpec
) -> list[Candidate]:
    """Evaluate every single aggregator's result on the validation set, in precedence order."""
    if len(validation) == 0:
        raise AggregationError("ensemble needs a non-empty validation set")
    out = []
    for kind in ENSEMBLE_PRECEDENCE:
        try:
            agg = aggregate_single(kind, updates, spec)
            candidate_model = global_model.with_weights(params.add(global_model.weights, agg))
        except (AggregationError, params.ParamError) as exc:
            out.append(Candidate(kind, None, None, skipped=str(exc)))
            continue
        out.append(Candidate(kind, agg, evaluate(candidate_model, validation)))
    return out


def ensemble_agg(
    updates: Sequence[ClientUpdate], global_model: MlpModel, validation: Dataset, spec: AggregatorSpec
) -> tuple[np.ndarray, AggregatorKind]:
    """Pick the candidate aggregate that scores best on the validation set.

    Candidates that cannot be computed (e.g. Krum with too few updates) are
    skipped. Ties go to the earlier entry of ``ENSEMBLE_PRECEDENCE``.
    """
    best = None
    for cand in ensemble_candidates(updates, global_model, validation, spec):
        if cand.update is None:
            log.debug("ensemble skipped %s: %s", cand.kind.value, cand.skipped)
            continue
        if best is None or cand.accuracy > best.accuracy:
            best = cand
    if best is None:
        raise AggregationError("every ensemble candidate was infeasible")
    return best.update, best.kind


def aggregate(
    spec: AggregatorSpec,
    updates: Sequence[ClientUpdate],
    global_model: Optional[MlpModel] = None,
    validation: Optional[Dataset] = None,
) -> tuple[np.ndarray, Optional[AggregatorKind]]:
    """Dispatch on ``spec.kind``; the second item is the ensemble's pick, else None."""
    if spec.kind is AggregatorKind.ENSEMBLE:
        if global_model is None or validation is None:
            raise AggregationError("ensemble needs the global model and a validation set")
        return ensemble_agg(updates, global_model, validation, spec)
    return aggregate_single(spec.kind, updates, spec), None
