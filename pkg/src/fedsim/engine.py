"""The federated round loop: sampling, local training, attacks, aggregation.

A run is a pure function of its :class:`ExperimentConfig` and run seed. All
randomness is drawn from generators seeded by :func:`derive_seed` with a
purpose tag, so adding a draw in one place never shifts another.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from fedsim import params
from fedsim.aggregate import (
    AggregatorKind,
    AggregatorSpec,
    ClientUpdate,
    KrumPreconditionError,
    aggregate,
)
from fedsim.data import ClientShard, Dataset, PartitionSpec, generate_synthetic, load_csv, partition
from fedsim.model import MlpModel, TrainingConfig, compute_update, evaluate, init_model, local_train
from fedsim.seeding import derive_seed, rng_for, round_half_up
from fedsim.stats import backdoor_accuracy, median_of
from fedsim.threat import (
    ByzantineAssignment,
    ThreatKind,
    ThreatSpec,
    backdoor_scale,
    corrupt_shard,
    random_update,
    select_byzantine,
    sign_flip,
)

log = logging.getLogger(__name__)

# Largest trim fraction strictly below one half.
MAX_BETA = math.nextafter(0.5, 0.0)


class ConfigError(ValueError):
    pass


class RunFailure(RuntimeError):
    """A run aborted; ``label`` names the configuration and run."""

    def __init__(self, label: str, cause: BaseException):
        super().__init__(f"{label}: {type(cause).__name__}: {cause}")
        self.label = label
        self.cause = cause


class Mode(str, enum.Enum):
    CROSS_DEVICE = "cross-device"
    CROSS_SILO = "cross-silo"


@dataclass(frozen=True)
class SyntheticSource:
    num_classes: int = 4
    feature_dim: int = 20
    per_class: int = 250
    spread: float = 0.15
    seed: int = 0

    def load(self) -> Dataset:
        return generate_synthetic(self.num_classes, self.feature_dim, self.per_class, self.spread, self.seed)


@dataclass(frozen=True)
class CsvSource:
    path: str

    def load(self) -> Dataset:
        return load_csv(Path(self.path))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Union[SyntheticSource, CsvSource] = field(default_factory=SyntheticSource)
    num_clients: int = 20
    clients_per_round: int = 5
    mode: Mode = Mode.CROSS_DEVICE
    non_iid_degree: float = 0.0
    hidden_dims: tuple[int, ...] = (64,)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    threat: ThreatSpec = field(default_factory=ThreatSpec)
    rounds: int = 60
    master_seed: int = 0
    num_runs: int = 10
    test_fraction: float = 0.2
    validation_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_clients < 1:
            raise ConfigError("num_clients must be positive")
        if self.mode is Mode.CROSS_SILO and self.clients_per_round != self.num_clients:
            object.__setattr__(self, "clients_per_round", self.num_clients)
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError("clients_per_round must lie in [1, num_clients]")
        if self.rounds < 1 or self.num_runs < 1:
            raise ConfigError("rounds and num_runs must be positive")
        if not 0.0 < self.test_fraction < 1.0 or not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("test_fraction and validation_fraction must lie in (0, 1)")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden layer sizes must be positive")
        PartitionSpec(self.num_clients, self.non_iid_degree)


def resolve_aggregator(cfg: ExperimentConfig) -> AggregatorSpec:
    """Fill in Krum's ``f`` and the trim fraction from the threat proportion.

    The default ``f`` is the expected byzantine count per round, capped so
    that Krum still has at least one neighbour to score. The default trim
    fraction is the proportion itself, capped just below one half.
    """
    spec = cfg.aggregator
    p = cfg.threat.proportion if cfg.threat.kind is not ThreatKind.NONE else 0.0
    m = cfg.clients_per_round
    f = spec.f
    if f is None:
        f = max(0, min(round_half_up(p * m), m - 3))
    beta = spec.beta if spec.beta is not None else min(p, MAX_BETA)
    resolved = replace(spec, f=f, beta=beta)
    if resolved.kind is AggregatorKind.KRUM and m - f - 2 < 1:
        raise KrumPreconditionError(f"Krum needs clients_per_round - f - 2 >= 1, got m={m}, f={f}")
    return resolved


@dataclass(frozen=True, eq=False)
class World:
    """Everything a run holds fixed after setup."""

    config: ExperimentConfig
    run_seed: int
    layer_dims: tuple[int, ...]
    aggregator: AggregatorSpec
    clean_shards: tuple[ClientShard, ...]
    shards: tuple[ClientShard, ...]
    test: Dataset
    validation: Dataset
    byzantine: ByzantineAssignment


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_accuracy: float
    backdoor_accuracy: Optional[float] = None
    chosen_aggregator: Optional[str] = None
    wall_time: float = 0.0


@dataclass(frozen=True, eq=False)
class State:
    world: World
    round: int
    model: MlpModel
    records: tuple[RoundRecord, ...] = ()


@dataclass(frozen=True)
class RunResult:
    run_index: int
    seed: int
    records: tuple[RoundRecord, ...]

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]


@dataclass(frozen=True)
class RepeatedResult:
    runs: tuple[RunResult, ...]
    failures: tuple[str, ...]
    medians: dict


def _split(ds: Dataset, cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/test split, then a validation slice carved from the test side."""
    rng = rng_for(seed, "split")
    train_idx, test_idx, val_idx = [], [], []
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = round_half_up(cfg.test_fraction * members.shape[0])
        n_val = round_half_up(cfg.validation_fraction * n_test)
        val_idx.append(members[:n_val])
        test_idx.append(members[n_val:n_test])
        train_idx.append(members[n_test:])
    train, test, val = (np.sort(np.concatenate(parts)) for parts in (train_idx, test_idx, val_idx))
    if test.size == 0 or val.size == 0 or train.size < cfg.num_clients:
        raise ConfigError(f"dataset of {len(ds)} examples is too small for this split")
    return ds.subset(train), ds.subset(test), ds.subset(val)


def setup(cfg: ExperimentConfig, run_seed: Optional[int] = None) -> State:
    """Build the dataset split, shards, byzantine set and initial model for one run.

    Data-level corruption is applied here, once, to every byzantine shard.
    """
    seed = cfg.master_seed if run_seed is None else run_seed
    aggregator = resolve_aggregator(cfg)
    ds = cfg.dataset.load()
    train, test, val = _split(ds, cfg, seed)
    clean = tuple(partition(train, PartitionSpec(cfg.num_clients, cfg.non_iid_degree, derive_seed(seed, "partition"))))

    threat = cfg.threat
    if threat.active:
        byz = select_byzantine(cfg.num_clients, threat.proportion, derive_seed(seed, "byzantine"))
    else:
        byz = ByzantineAssignment(frozenset(), cfg.num_clients)
    if threat.kind is ThreatKind.BACKDOOR:
        threat.pattern.apply(test.features[:1])
        if threat.target_label >= ds.num_classes:
            raise ConfigError(f"backdoor target {threat.target_label} outside {ds.num_classes} classes")

    shards = tuple(
        corrupt_shard(s, threat, derive_seed(seed, s.client_id, "corrupt"))
        if s.client_id in byz and threat.kind.corrupts_data else s
        for s in clean
    )
    dims = (ds.feature_dim, *cfg.hidden_dims, ds.num_classes)
    world = World(cfg, seed, dims, aggregator, clean, shards, test, val, byz)
    return State(world, 0, init_model(dims, derive_seed(seed, "init")))


def sample_clients(world: World, rnd: int) -> np.ndarray:
    cfg = world.config
    if cfg.mode is Mode.CROSS_SILO or cfg.clients_per_round == cfg.num_clients:
        return np.arange(cfg.num_clients)
    picked = rng_for(world.run_seed, rnd, "sample").choice(cfg.num_clients, size=cfg.clients_per_round, replace=False)
    return np.sort(picked)


def client_update(world: World, model: MlpModel, client: int, rnd: int) -> ClientUpdate:
    cfg = world.config
    shard = world.shards[client]
    threat = cfg.threat
    byzantine = client in world.byzantine
    if byzantine and threat.kind is ThreatKind.RANDOM_UPDATE:
        seed = derive_seed(world.run_seed, client, rnd, "random_update")
        return ClientUpdate(client, random_update(model.weights.shape[0], threat.std_dev, seed), len(shard))

    train_cfg = replace(cfg.training, shuffle_seed=derive_seed(world.run_seed, client, rnd, "train"))
    update = compute_update(local_train(model, shard, train_cfg), model)
    if byzantine and threat.kind is ThreatKind.SIGN_FLIP:
        update = sign_flip(update, threat.multiplier)
    elif byzantine and threat.kind is ThreatKind.BACKDOOR:
        update = backdoor_scale(update, threat.multiplier)
    return ClientUpdate(client, update, len(shard))


def run_round(state: State) -> State:
    """One round: sample, train, attack, aggregate, apply, measure."""
    world = state.world
    cfg = world.config
    if state.round >= cfg.rounds:
        raise ConfigError(f"all {cfg.rounds} rounds already ran")
    start = time.perf_counter()
    rnd = state.round
    updates = [client_update(world, state.model, int(c), rnd) for c in sample_clients(world, rnd)]
    agg, chosen = aggregate(world.aggregator, updates, state.model, world.validation)
    model = state.model.with_weights(params.add(state.model.weights, agg))

    backdoor = None
    if cfg.threat.kind is ThreatKind.BACKDOOR:
        backdoor = backdoor_accuracy(model, world.test, cfg.threat.pattern, cfg.threat.target_label)
    record = RoundRecord(
        round=rnd + 1,
        test_accuracy=evaluate(model, world.test),
        backdoor_accuracy=backdoor,
        chosen_aggregator=chosen.value if chosen is not None else None,
        wall_time=time.perf_counter() - start,
    )
    return State(world, rnd + 1, model, state.records + (record,))


def run_seed_for(cfg: ExperimentConfig, run_index: int) -> int:
    return derive_seed(cfg.master_seed, run_index)


def run_experiment(cfg: ExperimentConfig, run_index: int = 0) -> RunResult:
    seed = run_seed_for(cfg, run_index)
    state = setup(cfg, seed)
    while state.round < cfg.rounds:
        state = run_round(state)
    return RunResult(run_index, seed, state.records)


def _guarded_run(cfg: ExperimentConfig, run_index: int):
    try:
        return run_experiment(cfg, run_index)
    except KrumPreconditionError:
        raise
    except Exception as exc:  # noqa: BLE001 - failures are reported per run
        return RunFailure(f"run {run_index}", exc)


def final_medians(runs) -> dict:
    medians = {"test_accuracy": median_of([r.final.test_accuracy for r in runs])}
    backdoor = [r.final.backdoor_accuracy for r in runs if r.final.backdoor_accuracy is not None]
    if backdoor:
        medians["backdoor_accuracy"] = median_of(backdoor)
    return medians


def run_repeated(cfg: ExperimentConfig, workers: int = 1) -> RepeatedResult:
    """Run ``cfg.num_runs`` independent runs and take per-metric medians of the final round.

    Failed runs are reported and left out of the medians. Results do not
    depend on ``workers``.
    """
    indices = range(cfg.num_runs)
    if workers > 1 and cfg.num_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_guarded_run, [cfg] * cfg.num_runs, indices))
    else:
        outcomes = [_guarded_run(cfg, i) for i in indices]
    runs = tuple(o for o in outcomes if isinstance(o, RunResult))
    failures = tuple(str(o) for o in outcomes if isinstance(o, RunFailure))
    for msg in failures:
        log.warning("run failed: %s", msg)
    if not runs:
        raise RunFailure("all runs", RuntimeError("; ".join(failures)))
    return RepeatedResult(runs, failures, final_medians(runs))
