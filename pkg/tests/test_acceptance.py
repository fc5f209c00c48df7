"""Acceptance suite: algorithm oracles plus directional experiments.

The directional criteria share one desk-scale scenario (synthetic 4-class,
20-feature data, 20 clients, 5 sampled per round, 60 rounds, 10 runs), which
is what ``ExperimentConfig()`` defaults to. Every test records one PASS/FAIL
line; ``conftest.py`` prints them at the end of the session.
"""

import functools
import json
import math
import time

import numpy as np

from fedsim import cli, params
from fedsim.aggregate import AggregatorKind, AggregatorSpec, ClientUpdate, krum
from fedsim.data import Dataset, PartitionSpec, generate_synthetic, groups_per_client, partition
from fedsim.engine import ExperimentConfig, run_repeated
from fedsim.model import init_model
from fedsim.stats import mann_whitney_u
from fedsim.threat import ThreatKind, ThreatSpec
from oracles import exact_permutation_p, fd_max_relative_error, krum_choice, u_pair_count

RESULTS: list[str] = []

CHANCE = 0.25
ENSEMBLE_NON_IID = 0.4
SINGLE = ("fedavg", "krum", "median", "trimmed_mean")


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def scenario(aggregator: str, threat: str = "none", p: float = 0.0, q: float = 0.0):
    """Final-round medians of the standard scenario, plus its wall time."""
    cfg = ExperimentConfig(
        aggregator=AggregatorSpec(AggregatorKind(aggregator)),
        threat=ThreatSpec(ThreatKind(threat), p),
        non_iid_degree=q,
    )
    start = time.perf_counter()
    medians = run_repeated(cfg).medians
    return medians, time.perf_counter() - start


def acc(*key) -> float:
    return scenario(*key)[0]["test_accuracy"]


# -- oracle criteria --------------------------------------------------------

def test_criterion_01_krum_matches_brute_force():
    rng = np.random.default_rng(101)
    agree = total = 0
    for _ in range(200):
        f = int(rng.integers(1, 4))
        n = int(rng.integers(max(5, f + 3), 13))
        dim = int(rng.integers(1, 8))
        vecs = [rng.normal(size=dim) for _ in range(n)]
        ids = [int(i) for i in rng.permutation(100)[:n]]
        picked = krum([ClientUpdate(i, v, 1) for i, v in zip(ids, vecs)], f)
        chosen = [i for i, v in zip(ids, vecs) if np.array_equal(v, picked)]
        total += 1
        agree += int(chosen == [krum_choice(vecs, ids, f)])
    record(1, agree == total, f"Krum agreement {agree}/{total}")


def _rel_err(got, want):
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), np.finfo(float).tiny)))


def test_criterion_02_median_trimmed_mean_oracles():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 16))
        dim = int(rng.integers(1, 10))
        vs = [rng.normal(size=dim) * 10 for _ in range(n)]
        beta = float(rng.uniform(0, 0.5))
        if n - 2 * math.floor(beta * n) < 1:
            beta = 0.0
        cols = [sorted(v[c] for v in vs) for c in range(dim)]
        t = math.floor(beta * n)
        med = np.array([col[n // 2] if n % 2 else (col[n // 2 - 1] + col[n // 2]) / 2 for col in cols])
        trim = np.array([math.fsum(col[t: n - t]) / (n - 2 * t) for col in cols])
        worst = max(worst, _rel_err(params.coordinate_median(vs), med))
        worst = max(worst, _rel_err(params.coordinate_trimmed_mean(vs, beta), trim))
    record(2, worst <= 1e-12, f"max relative error {worst:.2e}")


def test_criterion_03_gradient_check():
    rng = np.random.default_rng(303)
    worst = 0.0
    for trial in range(20):
        dims = (int(rng.integers(2, 8)), int(rng.integers(2, 8)), int(rng.integers(2, 6)))
        model = init_model(dims, seed=1000 + trial)
        k = int(rng.integers(1, 10))
        batch = Dataset(rng.uniform(size=(k, dims[0])), rng.integers(0, dims[-1], size=k), dims[-1])
        worst = max(worst, fd_max_relative_error(model, batch, step=1e-5))
    record(3, worst <= 1e-5, f"max relative error {worst:.2e} over 20 pairs")


def test_criterion_04_mann_whitney():
    rng = np.random.default_rng(404)
    u_ok = True
    worst_p = 0.0
    for i in range(100):
        n1, n2 = (int(x) for x in rng.integers(3, 13, size=2))
        a = rng.normal(size=n1)
        b = rng.normal(0.7, 1.0, size=n2)
        if i % 3 == 0:  # every third pair on a coarse grid so ties occur
            a, b = np.round(a, 1), np.round(b, 1)
        res = mann_whitney_u(a.tolist(), b.tolist())
        u_ok &= res.u == u_pair_count(a, b)
        if n1 <= 8 and n2 <= 8:
            worst_p = max(worst_p, abs(res.p_value - exact_permutation_p(a.tolist(), b.tolist())))
    record(4, u_ok and worst_p <= 0.02, f"U exact={u_ok}, max |p - exact p|={worst_p:.4f}")


# -- directional criteria ---------------------------------------------------

def test_criterion_05_model_poisoning_breaks_fedavg():
    clean = acc("fedavg")
    sign = acc("fedavg", "sign_flip", 0.3)
    rand = acc("fedavg", "random_update", 0.3)
    bound = CHANCE + 0.10
    ok = clean >= 0.80 and (sign <= bound or rand <= bound)
    record(5, ok, f"clean {clean:.3f} (>= 0.80); SignFlip {sign:.3f}, RandomUpdate {rand:.3f} (either <= {bound:.2f})")


def test_criterion_06_krum_resists_untargeted_attacks():
    base = acc("krum")
    gaps = {}
    for threat in ("sign_flip", "random_update"):
        for p in (0.1, 0.3):
            gaps[f"{threat}@{p}"] = base - acc("krum", threat, p)
    worst = max(gaps.values())
    detail = ", ".join(f"{k} {v:+.3f}" for k, v in gaps.items())
    record(6, worst <= 0.05, f"Krum no-attack {base:.3f}; drops {detail}")


def test_criterion_07_mutators_are_mild():
    clean = acc("fedavg")
    drops = {m: clean - acc("fedavg", m, 0.5) for m in ("delete", "unbalance", "overlap")}
    detail = ", ".join(f"{k} {v:+.3f}" for k, v in drops.items())
    record(7, max(drops.values()) <= 0.10, f"clean {clean:.3f}; drops {detail}")


def test_criterion_08_backdoor():
    clean = acc("fedavg")
    fed = scenario("fedavg", "backdoor", 0.3)[0]
    kr = scenario("krum", "backdoor", 0.3)[0]
    ok = (
        fed["backdoor_accuracy"] >= 0.80
        and kr["backdoor_accuracy"] <= 0.20
        and clean - fed["test_accuracy"] <= 0.10
    )
    record(8, ok, f"FedAvg backdoor {fed['backdoor_accuracy']:.3f}, main {fed['test_accuracy']:.3f} "
                  f"(clean {clean:.3f}); Krum backdoor {kr['backdoor_accuracy']:.3f}")


ENSEMBLE_GRID = [(t, p) for t in ("label_flip", "sign_flip") for p in (0.1, 0.3, 0.5)]


def test_criterion_09_ensemble_competitive():
    table = {cell: {a: acc(a, *cell, ENSEMBLE_NON_IID) for a in SINGLE + ("ensemble",)} for cell in ENSEMBLE_GRID}
    means = {a: float(np.mean([table[c][a] for c in ENSEMBLE_GRID])) for a in SINGLE + ("ensemble",)}
    best_single = max(means[a] for a in SINGLE)
    cells_ok = sum(table[c]["ensemble"] >= max(table[c][a] for a in SINGLE) - 0.05 for c in ENSEMBLE_GRID)
    ok = means["ensemble"] >= best_single - 0.02 and cells_ok >= 4
    record(9, ok, f"ensemble mean {means['ensemble']:.3f} vs best single {best_single:.3f}; "
                  f"{cells_ok}/6 cells within 5 points (q={ENSEMBLE_NON_IID})")


def test_criterion_10_ensemble_overhead():
    cell = ("label_flip", 0.3, ENSEMBLE_NON_IID)
    fed_time = scenario("fedavg", *cell)[1]
    ens_time = scenario("ensemble", *cell)[1]
    ratio = ens_time / fed_time
    record(10, ratio <= 4.0, f"ensemble {ens_time:.1f}s vs FedAvg {fed_time:.1f}s, ratio {ratio:.2f}")


def test_criterion_11_byte_identical_outputs(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDSIM_SEED", raising=False)
    cfg = tmp_path / "cell.json"
    cfg.write_text(json.dumps({
        "base": {"master_seed": 7},
        "grid": {"aggregators": ["krum", "ensemble"], "threats": ["sign_flip"], "proportions": [0.3]},
    }))
    outs = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        assert cli.main(["run", str(cfg), "--out", str(out), "--threads", str(threads)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outs[0] == outs[1] and len(outs[0]) == 3
    record(11, same, f"{len(outs[0])} files identical across --threads 1 and 3: {same}")


def test_criterion_12_partitioner_properties():
    rng = np.random.default_rng(1212)
    failures = []
    for draw in range(100):
        C = int(rng.integers(2, 11))
        per_class = int(rng.integers(10, 80))
        n = int(rng.integers(1, max(2, C * per_class // (2 * C)) + 1))
        ds = generate_synthetic(C, 3, per_class, 0.1, seed=draw)
        seed = int(rng.integers(2**31))
        diversity = []
        for q in (0.0, 0.4, 0.7):
            shards = partition(ds, PartitionSpec(n, q, seed))
            idx = np.concatenate([s.indices for s in shards])
            if np.unique(idx).size != idx.size:
                failures.append((draw, q, "overlap"))
            if len({len(s) for s in shards}) != 1:
                failures.append((draw, q, "unequal sizes"))
            labels = [len(np.unique(s.data.labels)) for s in shards]
            g = groups_per_client(q, C)
            if any(k != g for k in labels):
                failures.append((draw, q, f"label counts {labels} != {g}"))
            if q == 0.0 and any(k != C for k in labels):
                failures.append((draw, q, "q=0 shard misses a class"))
            diversity.append(max(labels))
        if not diversity[0] >= diversity[1] >= diversity[2]:
            failures.append((draw, "monotone", diversity))
    record(12, not failures, f"100 draws, violations: {failures[:3]}")
