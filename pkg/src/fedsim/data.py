"""Datasets, synthetic generation, CSV loading and non-iid partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from fedsim.seeding import round_half_up

MAX_LABEL = 1_000_000
MAX_PARTITION_ATTEMPTS = 1000


class DataError(ValueError):
    """Base class for dataset problems."""


class DatasetFileNotFound(DataError, FileNotFoundError):
    pass


class RaggedRowError(DataError):
    pass


class NonNumericCellError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class FeatureRangeError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class PartitionError(DataError):
    pass


class LabeledExample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled feature rows with intensities in ``[0, 1]``.

    ``features`` is an ``(N, d)`` float array and ``labels`` an ``(N,)`` int
    array. Both are made read-only so datasets can be shared freely.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.features[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def replace(self, features=None, labels=None) -> "Dataset":
        return Dataset(
            self.features if features is None else features,
            self.labels if labels is None else labels,
            self.num_classes,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @classmethod
    def from_examples(cls, examples, num_classes: int) -> "Dataset":
        examples = list(examples)
        if not examples:
            raise EmptyDatasetError("no examples given")
        X = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
        y = np.array([e.label for e in examples], dtype=np.int64)
        return cls(X, y, num_classes)


@dataclass(frozen=True, eq=False)
class ClientShard:
    """One client's private slice of the training data.

    ``indices`` records which rows of the partitioned dataset the shard was
    built from; mutators keep it only as provenance.
    """

    client_id: int
    data: Dataset
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.data)

    @property
    def num_classes(self) -> int:
        return self.data.num_classes

    def with_data(self, data: Dataset) -> "ClientShard":
        return ClientShard(self.client_id, data, self.indices)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    non_iid_degree: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise PartitionError("num_clients must be positive")
        if not 0.0 <= self.non_iid_degree < 1.0:
            raise PartitionError(f"non_iid_degree must lie in [0, 1), got {self.non_iid_degree}")


def generate_synthetic(
    num_classes: int, feature_dim: int, per_class: int, spread: float, seed: int
) -> Dataset:
    """Balanced Gaussian blobs around random centroids in ``[0.2, 0.8]^d``, clipped to ``[0, 1]``."""
    if num_classes < 2:
        raise DataError("need at least two classes")
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0.2, 0.8, size=(num_classes, feature_dim))
    X = np.repeat(centroids, per_class, axis=0)
    X = X + rng.normal(0.0, 1.0, size=X.shape) * spread
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(np.clip(X, 0.0, 1.0), y, num_classes)


def _parse_cell(cell: str, line: int, col: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise NonNumericCellError(f"line {line}, column {col}: non-numeric cell {cell!r}") from None
    if not math.isfinite(value):
        raise NonNumericCellError(f"line {line}, column {col}: non-finite value {cell!r}")
    return value


def load_csv(path) -> Dataset:
    """Read rows of ``label,f1,...,fd`` after a header line."""
    path = Path(path)
    if not path.is_file():
        raise DatasetFileNotFound(f"no such dataset file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path} is empty")
        width = len(header)
        if width < 2:
            raise RaggedRowError(f"{path}: header needs a label and at least one feature")
        labels: list[int] = []
        rows: list[list[float]] = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRowError(f"line {line}: expected {width} cells, got {len(row)}")
            label = _parse_cell(row[0], line, 1)
            if label != int(label) or label < 0:
                raise LabelRangeError(f"line {line}: label must be a non-negative integer, got {row[0]!r}")
            if label >= MAX_LABEL:
                raise LabelRangeError(f"line {line}: label {int(label)} exceeds {MAX_LABEL - 1}")
            feats = [_parse_cell(c, line, j) for j, c in enumerate(row[1:], start=2)]
            if any(f < 0.0 or f > 1.0 for f in feats):
                raise FeatureRangeError(f"line {line}: features must lie in [0, 1]")
            labels.append(int(label))
            rows.append(feats)
    if not rows:
        raise EmptyDatasetError(f"{path} has a header but no data rows")
    return Dataset(np.array(rows), np.array(labels), max(labels) + 1)


def groups_per_client(non_iid_degree: float, num_classes: int) -> int:
    return max(1, round_half_up((1.0 - non_iid_degree) * num_classes))


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split ``ds`` into equal-size shards with a controlled number of classes each.

    Every client draws ``g`` distinct classes and takes one chunk from each.
    Chunks are equal-size slices of the shuffled per-class samples; lower
    ``non_iid_degree`` means more classes per client and smaller chunks.
    The chunk size starts at ``floor(floor(N / n) / g)`` and only shrinks when
    the classes cannot supply ``n * g`` chunks of that size. Examples that do
    not fill a whole chunk, and chunks nobody draws, are left out so that all
    shards stay the same size.
    """
    n = spec.num_clients
    if n > len(ds):
        raise PartitionError(f"{n} clients but only {len(ds)} examples")
    g = min(groups_per_client(spec.non_iid_degree, ds.num_classes), ds.num_classes)
    shard_size = len(ds) // n
    chunk = shard_size // g
    if chunk < 1:
        raise PartitionError(f"shard size {shard_size} is too small for {g} classes per client")

    counts = ds.class_counts()
    # Floors can leave fewer than n*g chunks; shrink the chunk until they fit.
    while chunk > 1 and (counts // chunk).sum() < n * g:
        chunk -= 1
    available = counts // chunk
    if available.sum() < n * g or np.count_nonzero(available) < g:
        raise PartitionError(
            f"only {available.sum()} chunks of size {chunk} for {n} clients needing {g} each"
        )

    rng = np.random.default_rng(spec.seed)
    chunks: list[list[np.ndarray]] = []
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        chunks.append([members[i * chunk: (i + 1) * chunk] for i in range(available[c])])

    seeds = np.random.SeedSequence(spec.seed).spawn(MAX_PARTITION_ATTEMPTS)
    for attempt_seed in seeds:
        picks = _assign_chunks(available, n, g, np.random.default_rng(attempt_seed))
        if picks is not None:
            break
    else:
        raise PartitionError(f"chunk assignment dead-ended {MAX_PARTITION_ATTEMPTS} times")

    shards = []
    for client, taken in enumerate(picks):
        idx = np.sort(np.concatenate([chunks[c][j] for c, j in taken]))
        shards.append(ClientShard(client, ds.subset(idx), idx))
    return shards


def _assign_chunks(available: np.ndarray, n: int, g: int, rng: np.random.Generator):
    """One randomized assignment of ``(class, chunk)`` pairs to clients, or None on a dead end.

    Classes are drawn without replacement with probability proportional to
    their remaining chunks; each class's chunks are handed out in a random
    order.
    """
    remaining = available.astype(np.int64).copy()
    chunk_order = [rng.permutation(int(k)) for k in available]
    picks: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for client in rng.permutation(n):
        if np.count_nonzero(remaining) < g:
            return None
        classes = rng.choice(remaining.shape[0], size=g, replace=False, p=remaining / remaining.sum())
        for c in sorted(int(c) for c in classes):
            remaining[c] -= 1
            picks[client].append((c, int(chunk_order[c][remaining[c]])))
    return picks
