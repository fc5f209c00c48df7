"""Byzantine client selection, poisoning attacks and data mutators.

Data-level operations (label flip, backdoor poisoning, the four mutators)
take a :class:`ClientShard` and return a new one. Model-level operations
(random update, sign flip, backdoor scaling) take and return parameter
vectors. Every randomized operation draws only from the seed it is given.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from fedsim import params
from fedsim.data import ClientShard, DataError
from fedsim.seeding import round_half_up


class ThreatError(ValueError):
    pass


class ThreatKind(str, enum.Enum):
    NONE = "none"
    LABEL_FLIP = "label_flip"
    RANDOM_UPDATE = "random_update"
    SIGN_FLIP = "sign_flip"
    BACKDOOR = "backdoor"
    NOISE = "noise"
    DELETE = "delete"
    UNBALANCE = "unbalance"
    OVERLAP = "overlap"

    @property
    def corrupts_data(self) -> bool:
        return self in _DATA_KINDS

    @property
    def corrupts_update(self) -> bool:
        return self in (ThreatKind.RANDOM_UPDATE, ThreatKind.SIGN_FLIP, ThreatKind.BACKDOOR)


_DATA_KINDS = frozenset({
    ThreatKind.LABEL_FLIP, ThreatKind.BACKDOOR, ThreatKind.NOISE,
    ThreatKind.DELETE, ThreatKind.UNBALANCE, ThreatKind.OVERLAP,
})


@dataclass(frozen=True)
class BackdoorPattern:
    """Pixel-pattern trigger: ``value`` is written at every position in ``indices``."""

    indices: tuple[int, ...] = (0, 1, 2, 3)
    value: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.indices:
            raise ThreatError("backdoor pattern needs at least one index")
        if min(self.indices) < 0:
            raise ThreatError("backdoor pattern indices must be non-negative")
        if not 0.0 <= self.value <= 1.0:
            raise ThreatError("backdoor pattern value must lie in [0, 1]")

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Return a copy of the feature rows with the trigger stamped in."""
        if max(self.indices) >= X.shape[1]:
            raise ThreatError(f"pattern index {max(self.indices)} outside {X.shape[1]} features")
        out = np.array(X, dtype=np.float64, copy=True)
        out[:, list(self.indices)] = self.value
        return out


@dataclass(frozen=True)
class ThreatSpec:
    kind: ThreatKind = ThreatKind.NONE
    proportion: float = 0.0
    std_dev: float = 2.0
    multiplier: float = 10.0
    portion: float = 0.5
    noise_pct: float = 0.5
    target_label: int = 0
    pattern: BackdoorPattern = field(default_factory=BackdoorPattern)
    poison_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", ThreatKind(self.kind))
        if not 0.0 <= self.proportion <= 1.0:
            raise ThreatError(f"proportion must lie in [0, 1], got {self.proportion}")
        if self.std_dev < 0:
            raise ThreatError("std_dev must be non-negative")
        if not self.multiplier > 0:
            raise ThreatError("multiplier must be positive")
        if not 0.0 <= self.portion < 1.0:
            raise ThreatError("portion must lie in [0, 1)")
        if not 0.0 <= self.noise_pct <= 1.0:
            raise ThreatError("noise_pct must lie in [0, 1]")
        if not 0.0 < self.poison_fraction < 1.0:
            raise ThreatError("poison_fraction must lie in (0, 1)")
        if self.target_label < 0:
            raise ThreatError("target_label must be non-negative")

    @property
    def active(self) -> bool:
        return self.kind is not ThreatKind.NONE and self.proportion > 0


@dataclass(frozen=True)
class ByzantineAssignment:
    affected: frozenset[int]
    num_clients: int

    def __contains__(self, client_id: int) -> bool:
        return client_id in self.affected

    def __len__(self) -> int:
        return len(self.affected)


def select_byzantine(n: int, p: float, seed: int) -> ByzantineAssignment:
    """Pick a uniform random subset of ``round(p*n)`` clients."""
    if not 0.0 <= p <= 1.0:
        raise ThreatError(f"proportion must lie in [0, 1], got {p}")
    k = round_half_up(p * n)
    chosen = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return ByzantineAssignment(frozenset(int(c) for c in chosen), n)


# -- data poisoning ---------------------------------------------------------

def label_flip(shard: ClientShard, seed: int) -> ClientShard:
    """Replace every label with a uniform draw over the other classes."""
    C = shard.num_classes
    if C < 2:
        raise ThreatError("label flip needs at least two classes")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(1, C, size=len(shard))
    return shard.with_data(shard.data.replace(labels=(shard.data.labels + offsets) % C))


def backdoor_poison(
    shard: ClientShard, pattern: BackdoorPattern, target: int, poison_fraction: float, seed: int
) -> ClientShard:
    if target >= shard.num_classes:
        raise ThreatError(f"target label {target} outside {shard.num_classes} classes")
    if not 0.0 < poison_fraction < 1.0:
        raise ThreatError("poison_fraction must lie in (0, 1)")
    n = len(shard)
    k = round_half_up(poison_fraction * n)
    chosen = np.random.default_rng(seed).choice(n, size=k, replace=False)
    X = np.array(shard.data.features)
    y = np.array(shard.data.labels)
    X[chosen] = pattern.apply(X[chosen])
    y[chosen] = target
    return shard.with_data(shard.data.replace(features=X, labels=y))


# -- model poisoning --------------------------------------------------------

def random_update(dim: int, std_dev: float, seed: int) -> np.ndarray:
    if dim < 1:
        raise ThreatError("dim must be positive")
    if std_dev < 0:
        raise ThreatError("std_dev must be non-negative")
    return np.random.default_rng(seed).normal(0.0, 1.0, size=dim) * std_dev


def sign_flip(honest_update: np.ndarray, multiplier: float) -> np.ndarray:
    if not multiplier > 0:
        raise ThreatError("multiplier must be positive")
    return params.scale(honest_update, -multiplier)


def backdoor_scale(update: np.ndarray, multiplier: float) -> np.ndarray:
    return params.scale(update, multiplier)


# -- mutators ---------------------------------------------------------------

def pixel_noise(X: np.ndarray, noise_pct: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian noise whose per-row variance is ``noise_pct`` times the row's variance."""
    std = np.sqrt(noise_pct * np.var(X, axis=1, keepdims=True))
    return rng.normal(0.0, 1.0, size=X.shape) * std


def noise_mutator(shard: ClientShard, noise_pct: float, seed: int) -> ClientShard:
    if not 0.0 <= noise_pct <= 1.0:
        raise ThreatError("noise_pct must lie in [0, 1]")
    if noise_pct == 0.0 or len(shard) == 0:
        return shard
    X = shard.data.features
    noisy = np.clip(X + pixel_noise(X, noise_pct, np.random.default_rng(seed)), 0.0, 1.0)
    return shard.with_data(shard.data.replace(features=noisy))


def delete_mutator(shard: ClientShard, portion: float, seed: int) -> ClientShard:
    if not 0.0 <= portion < 1.0:
        raise ThreatError("portion must lie in [0, 1)")
    n = len(shard)
    k = round_half_up(portion * n)
    if k >= n:
        raise DataError(f"deleting {k} of {n} examples would leave the shard empty")
    drop = np.random.default_rng(seed).choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), drop)
    return shard.with_data(shard.data.subset(keep))


def unbalance_mutator(shard: ClientShard, portion: float, seed: int) -> ClientShard:
    """Thin out classes that are rarer than the shard's average present class."""
    if not 0.0 <= portion < 1.0:
        raise ThreatError("portion must lie in [0, 1)")
    labels = shard.data.labels
    counts = shard.data.class_counts()
    present = counts[counts > 0]
    if present.size == 0:
        return shard
    mean = present.mean()
    rng = np.random.default_rng(seed)
    drop = []
    for c in range(shard.num_classes):
        if 0 < counts[c] < mean:
            members = np.flatnonzero(labels == c)
            k = round_half_up(portion * counts[c])
            drop.extend(rng.choice(members, size=k, replace=False).tolist())
    if not drop:
        return shard
    keep = np.setdiff1d(np.arange(len(shard)), np.array(drop))
    return shard.with_data(shard.data.subset(keep))


def overlap_mutator(shard: ClientShard, portion: float, seed: int) -> ClientShard:
    """Copy part of the most frequent class and relabel the copies as the runner-up."""
    if not 0.0 <= portion < 1.0:
        raise ThreatError("portion must lie in [0, 1)")
    counts = shard.data.class_counts()
    if np.count_nonzero(counts) < 2:
        raise ThreatError("overlap needs at least two classes in the shard")
    # Stable sort on -count keeps the lower label first among ties.
    a, b = (int(c) for c in np.argsort(-counts, kind="stable")[:2])
    k = round_half_up(portion * counts[a])
    if k == 0:
        return shard
    members = np.flatnonzero(shard.data.labels == a)
    copies = np.sort(np.random.default_rng(seed).choice(members, size=k, replace=False))
    X = np.concatenate([shard.data.features, shard.data.features[copies]])
    y = np.concatenate([shard.data.labels, np.full(k, b, dtype=np.int64)])
    return shard.with_data(shard.data.replace(features=X, labels=y))


def corrupt_shard(shard: ClientShard, threat: ThreatSpec, seed: int) -> ClientShard:
    """Apply the data-level part of ``threat`` to one byzantine client's shard."""
    kind = threat.kind
    if kind is ThreatKind.LABEL_FLIP:
        return label_flip(shard, seed)
    if kind is ThreatKind.BACKDOOR:
        return backdoor_poison(shard, threat.pattern, threat.target_label, threat.poison_fraction, seed)
    if kind is ThreatKind.NOISE:
        return noise_mutator(shard, threat.noise_pct, seed)
    if kind is ThreatKind.DELETE:
        return delete_mutator(shard, threat.portion, seed)
    if kind is ThreatKind.UNBALANCE:
        return unbalance_mutator(shard, threat.portion, seed)
    if kind is ThreatKind.OVERLAP:
        return overlap_mutator(shard, threat.portion, seed)
    return shard
