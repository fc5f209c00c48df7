"""Experiment grids: config parsing, execution, result files and comparison.

A config file is JSON with two top-level keys::

    {
      "base": { ...one experiment... },
      "grid": {"aggregators": [...], "threats": [...],
               "proportions": [...], "non_iid_degrees": [...]}
    }

Every grid axis is optional; a missing axis keeps the base value. The cross
product of the axes defines the cells. Every key is listed in the README.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional

from fedsim.aggregate import AggregatorKind, AggregatorSpec, KrumPreconditionError
from fedsim.engine import (
    ConfigError,
    CsvSource,
    ExperimentConfig,
    Mode,
    RunFailure,
    RunResult,
    SyntheticSource,
    _guarded_run,
    resolve_aggregator,
)
from fedsim.model import TrainingConfig
from fedsim.stats import mann_whitney_u, median_of
from fedsim.threat import BackdoorPattern, ThreatKind, ThreatSpec

log = logging.getLogger(__name__)

SEED_ENV = "FEDSIM_SEED"
CSV_HEADER = ("round", "run", "test_accuracy", "backdoor_accuracy", "chosen_aggregator")
SUMMARY_NAME = "summary.json"
AXES = ("aggregator", "threat", "proportion", "non_iid_degree")


class ConfigFileError(ConfigError):
    """Config problem; ``path`` is the dotted field path when known."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# -- parsing ----------------------------------------------------------------

_SCHEMA: dict[str, Any] = {
    "dataset": {
        "synthetic": {"num_classes": int, "feature_dim": int, "per_class": int, "spread": float, "seed": int},
        "csv": str,
    },
    "num_clients": int,
    "clients_per_round": int,
    "mode": Mode,
    "non_iid_degree": float,
    "hidden_dims": [int],
    "training": {"learning_rate": float, "batch_size": int, "local_epochs": int},
    "aggregator": {"kind": AggregatorKind, "f": int, "beta": float},
    "threat": {
        "kind": ThreatKind,
        "proportion": float,
        "std_dev": float,
        "multiplier": float,
        "portion": float,
        "noise_pct": float,
        "target_label": int,
        "pattern": {"indices": [int], "value": float},
        "poison_fraction": float,
    },
    "rounds": int,
    "num_runs": int,
    "master_seed": int,
    "test_fraction": float,
    "validation_fraction": float,
}

_ENUMS = (AggregatorKind, ThreatKind, Mode)

_GRID_SCHEMA: dict[str, Any] = {
    "aggregators": [AggregatorKind],
    "threats": [ThreatKind],
    "proportions": [float],
    "non_iid_degrees": [float],
}


def _check(value, schema, path: str):
    """Validate ``value`` against a schema node and return it normalized."""
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            raise ConfigFileError("expected an object", path)
        out = {}
        for key, sub in value.items():
            sub_path = f"{path}.{key}" if path else key
            if key not in schema:
                raise ConfigFileError(f"unknown key {key!r} (allowed: {', '.join(sorted(schema))})", sub_path)
            if sub is None and schema[key] in (int, float):
                out[key] = None
                continue
            out[key] = _check(sub, schema[key], sub_path)
        return out
    if isinstance(schema, list):
        if not isinstance(value, list) or not value:
            raise ConfigFileError("expected a non-empty array", path)
        return [_check(v, schema[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(schema, type) and issubclass(schema, _ENUMS):
        valid = [m.value for m in schema]
        if value not in valid:
            raise ConfigFileError(f"invalid value {value!r} (valid: {', '.join(valid)})", path)
        return schema(value)
    if schema is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFileError(f"expected an integer, got {value!r}", path)
        return value
    if schema is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"expected a number, got {value!r}", path)
        return float(value)
    if schema is str:
        if not isinstance(value, str):
            raise ConfigFileError(f"expected a string, got {value!r}", path)
        return value
    raise AssertionError(f"bad schema node {schema!r}")


def _range(value: float, lo: float, hi: float, path: str, hi_open: bool = False):
    if value < lo or value > hi or (hi_open and value == hi):
        bracket = ")" if hi_open else "]"
        raise ConfigFileError(f"{value} out of range [{lo}, {hi}{bracket}", path)


def _build_config(base: dict) -> ExperimentConfig:
    kw: dict[str, Any] = {}
    ds = base.get("dataset", {"synthetic": {}})
    if len(ds) != 1:
        raise ConfigFileError("give exactly one of 'synthetic' or 'csv'", "base.dataset")
    if "csv" in ds:
        kw["dataset"] = CsvSource(ds["csv"])
    else:
        kw["dataset"] = SyntheticSource(**ds["synthetic"])
    for key in ("num_clients", "clients_per_round", "mode", "non_iid_degree", "rounds",
                "num_runs", "master_seed", "test_fraction", "validation_fraction"):
        if key in base:
            kw[key] = base[key]
    if "hidden_dims" in base:
        kw["hidden_dims"] = tuple(base["hidden_dims"])
    if "training" in base:
        kw["training"] = TrainingConfig(**base["training"])
    if "aggregator" in base:
        kw["aggregator"] = AggregatorSpec(**base["aggregator"])
    if "threat" in base:
        t = dict(base["threat"])
        if "pattern" in t:
            t["pattern"] = BackdoorPattern(tuple(t["pattern"].get("indices", (0, 1, 2, 3))),
                                           t["pattern"].get("value", 1.0))
        kw["threat"] = ThreatSpec(**t)
    if "mode" in base and kw["mode"] is Mode.CROSS_SILO:
        kw["clients_per_round"] = base.get("num_clients", ExperimentConfig.num_clients)
    return ExperimentConfig(**kw)


def _semantic_checks(base: dict, grid: dict) -> None:
    if "non_iid_degree" in base:
        _range(base["non_iid_degree"], 0.0, 1.0, "base.non_iid_degree", hi_open=True)
    threat = base.get("threat", {})
    if "proportion" in threat:
        _range(threat["proportion"], 0.0, 1.0, "base.threat.proportion")
    for i, p in enumerate(grid.get("proportions", [])):
        _range(p, 0.0, 1.0, f"grid.proportions[{i}]")
    for i, q in enumerate(grid.get("non_iid_degrees", [])):
        _range(q, 0.0, 1.0, f"grid.non_iid_degrees[{i}]", hi_open=True)
    beta = base.get("aggregator", {}).get("beta")
    if beta is not None:
        _range(beta, 0.0, 0.5, "base.aggregator.beta", hi_open=True)


def _fmt(x: float) -> str:
    return format(x, "g")


@dataclass(frozen=True)
class Cell:
    cell_id: str
    identity: dict
    config: ExperimentConfig


@dataclass(frozen=True)
class GridSpec:
    base: ExperimentConfig
    aggregators: tuple[AggregatorKind, ...]
    threats: tuple[ThreatKind, ...]
    proportions: tuple[float, ...]
    non_iid_degrees: tuple[float, ...]

    def cells(self) -> list[Cell]:
        out: dict[str, Cell] = {}
        for agg, threat, p, q in itertools.product(self.aggregators, self.threats, self.proportions, self.non_iid_degrees):
            if threat is ThreatKind.NONE:
                p = 0.0
            identity = {"aggregator": agg.value, "threat": threat.value, "proportion": p, "non_iid_degree": q}
            cell_id = f"{agg.value}__{threat.value}__p{_fmt(p)}__q{_fmt(q)}"
            if cell_id in out:
                continue
            cfg = replace(
                self.base,
                aggregator=replace(self.base.aggregator, kind=agg),
                threat=replace(self.base.threat, kind=threat, proportion=p),
                non_iid_degree=q,
            )
            out[cell_id] = Cell(cell_id, identity, cfg)
        return list(out.values())

    def __len__(self) -> int:
        return len(self.cells())


def parse_config(path, env: Optional[dict] = None) -> GridSpec:
    """Read and validate a grid config file.

    ``FEDSIM_SEED`` in ``env`` (default: the process environment) replaces
    ``base.master_seed``.
    """
    env = os.environ if env is None else env
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    doc = _check(raw, {"base": _SCHEMA, "grid": _GRID_SCHEMA}, "")
    base = doc.get("base", {})
    grid = doc.get("grid", {})
    _semantic_checks(base, grid)
    if SEED_ENV in env:
        try:
            base["master_seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigFileError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        cfg = _build_config(base)
    except ConfigFileError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigFileError(str(exc), "base") from None
    spec = GridSpec(
        base=cfg,
        aggregators=tuple(grid.get("aggregators", [cfg.aggregator.kind])),
        threats=tuple(grid.get("threats", [cfg.threat.kind])),
        proportions=tuple(grid.get("proportions", [cfg.threat.proportion])),
        non_iid_degrees=tuple(grid.get("non_iid_degrees", [cfg.non_iid_degree])),
    )
    try:
        spec.cells()
    except ValueError as exc:
        raise ConfigFileError(str(exc), "grid") from None
    return spec


# -- result files -----------------------------------------------------------

def _cell_csv(runs: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for run in sorted(runs, key=lambda r: r.run_index):
        for rec in run.records:
            w.writerow([
                rec.round,
                run.run_index,
                repr(rec.test_accuracy),
                "" if rec.backdoor_accuracy is None else repr(rec.backdoor_accuracy),
                rec.chosen_aggregator or "",
            ])
    return buf.getvalue()


def read_cell_csv(path) -> dict[int, dict]:
    """Final-round metrics per run from one cell's CSV: ``{run: {metric: value}}``."""
    finals: dict[int, tuple[int, dict]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            run, rnd = int(row["run"]), int(row["round"])
            metrics = {"test_accuracy": float(row["test_accuracy"])}
            if row["backdoor_accuracy"]:
                metrics["backdoor_accuracy"] = float(row["backdoor_accuracy"])
            if run not in finals or rnd > finals[run][0]:
                finals[run] = (rnd, metrics)
    return {run: m for run, (_, m) in sorted(finals.items())}


def _medians_from_finals(finals: dict[int, dict]) -> dict:
    out = {}
    for metric in ("test_accuracy", "backdoor_accuracy"):
        vals = [m[metric] for m in finals.values() if metric in m]
        if vals:
            out[metric] = median_of(vals)
    return out


@dataclass
class GridOutcome:
    summary: dict
    executed: list[str]
    skipped: list[str]
    failed: dict[str, str]
    precondition_failures: list[str]

    @property
    def exit_code(self) -> int:
        if self.precondition_failures:
            return 3
        if self.failed:
            return 2
        return 0


def run_grid(spec: GridSpec, out_dir, force: bool = False, threads: int = 1) -> GridOutcome:
    """Run every cell's repeated runs and write one CSV per cell plus ``summary.json``.

    Cells whose CSV already exists are skipped unless ``force``. Runs of all
    pending cells share one worker pool of ``threads`` processes; each CSV is
    written by this process only, after all of the cell's runs are back.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = spec.cells()
    log.info("grid has %d cells", len(cells))

    pending: list[Cell] = []
    skipped: list[str] = []
    precondition: dict[str, str] = {}
    for cell in cells:
        try:
            resolve_aggregator(cell.config)
        except KrumPreconditionError as exc:
            precondition[cell.cell_id] = str(exc)
            continue
        if (out_dir / f"{cell.cell_id}.csv").exists() and not force:
            skipped.append(cell.cell_id)
        else:
            pending.append(cell)

    tasks = [(cell, i) for cell in pending for i in range(cell.config.num_runs)]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_guarded_run, [c.config for c, _ in tasks], [i for _, i in tasks]))
    else:
        outcomes = [_guarded_run(c.config, i) for c, i in tasks]

    by_cell: dict[str, list] = {c.cell_id: [] for c in pending}
    for (cell, _), outcome in zip(tasks, outcomes):
        by_cell[cell.cell_id].append(outcome)

    failed: dict[str, str] = {}
    cell_failures: dict[str, list[str]] = {}
    for cell in pending:
        results = by_cell[cell.cell_id]
        runs = [r for r in results if isinstance(r, RunResult)]
        cell_failures[cell.cell_id] = [str(r) for r in results if isinstance(r, RunFailure)]
        for msg in cell_failures[cell.cell_id]:
            log.warning("%s: %s", cell.cell_id, msg)
        if not runs:
            failed[cell.cell_id] = "; ".join(cell_failures[cell.cell_id])
            continue
        (out_dir / f"{cell.cell_id}.csv").write_text(_cell_csv(runs), encoding="utf-8")

    entries = []
    for cell in cells:
        entry = dict(cell.identity, cell=cell.cell_id)
        csv_path = out_dir / f"{cell.cell_id}.csv"
        if cell.cell_id in precondition:
            entry.update(status="aggregation_precondition_failed", error=precondition[cell.cell_id])
        elif cell.cell_id in failed:
            entry.update(status="failed", error=failed[cell.cell_id])
        else:
            finals = read_cell_csv(csv_path)
            entry.update(
                status="ok",
                runs_completed=len(finals),
                failed_runs=cell_failures.get(cell.cell_id, []),
                medians=_medians_from_finals(finals),
            )
        entries.append(entry)
    summary = {"grid_size": len(cells), "master_seed": spec.base.master_seed, "cells": entries}
    (out_dir / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return GridOutcome(summary, [c.cell_id for c in pending if c.cell_id not in failed], skipped, failed, sorted(precondition))


# -- comparison -------------------------------------------------------------

def _cell_key(cell_id: str, ignore: tuple[str, ...]) -> str:
    parts = cell_id.split("__")
    return "__".join(p for axis, p in zip(AXES, parts) if axis not in ignore)


def compare(result_a, result_b, ignore_axes=(), alpha: float = 0.05) -> dict:
    """Mann-Whitney U per metric for every cell present in both result directories.

    ``ignore_axes`` drops axes (e.g. ``"aggregator"``) from the matching key so
    different aggregators on the same scenario can be compared.
    """
    ignore = tuple(ignore_axes)

    def index(d) -> dict[str, Path]:
        out = {}
        for p in sorted(Path(d).glob("*.csv")):
            key = _cell_key(p.stem, ignore)
            if key in out:
                raise ConfigError(f"{d}: cells {out[key].stem} and {p.stem} collide once {ignore} is ignored")
            out[key] = p
        return out

    a, b = index(result_a), index(result_b)
    shared = sorted(set(a) & set(b))
    rows = []
    for key in shared:
        fa, fb = read_cell_csv(a[key]), read_cell_csv(b[key])
        for metric in ("test_accuracy", "backdoor_accuracy"):
            va = [m[metric] for m in fa.values() if metric in m]
            vb = [m[metric] for m in fb.values() if metric in m]
            if not va or not vb:
                continue
            row = {"cell": key, "cell_a": a[key].stem, "cell_b": b[key].stem, "metric": metric,
                   "median_a": median_of(va), "median_b": median_of(vb)}
            if len(va) >= 3 and len(vb) >= 3:
                res = mann_whitney_u(va, vb)
                row.update(u=res.u, p_value=res.p_value, significant=res.p_value < alpha)
            else:
                row.update(u=None, p_value=None, significant=None)
            rows.append(row)
    warnings = []
    if not shared:
        warnings.append("no shared cells between the two result sets")
        log.warning(warnings[-1])
    return {"rows": rows, "warnings": warnings, "alpha": alpha}
