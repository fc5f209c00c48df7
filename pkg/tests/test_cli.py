import json

import pytest

from fedsim import cli
from fedsim.engine import ConfigError
from fedsim.grid import CSV_HEADER, compare, parse_config, read_cell_csv, run_grid
from fedsim.stats import mann_whitney_u

TINY_BASE = {
    "dataset": {"synthetic": {"per_class": 30}},
    "num_clients": 6,
    "clients_per_round": 3,
    "hidden_dims": [4],
    "rounds": 2,
    "num_runs": 3,
}


def write_config(tmp_path, base=None, grid=None, name="cfg.json"):
    doc = {"base": dict(TINY_BASE, **(base or {}))}
    if grid is not None:
        doc["grid"] = grid
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_minimal_config_has_one_cell(tmp_path):
    (tmp_path / "min.json").write_text("{}")
    spec = parse_config(tmp_path / "min.json", env={})
    assert len(spec) == 1
    assert spec.base.rounds == 60


@pytest.mark.parametrize(
    "doc, fragment",
    [
        ({"grid": {"aggregators": ["krumm"]}}, "grid.aggregators[0]"),
        ({"base": {"threat": {"kind": "sign_flip", "proportion": 1.5}}}, "base.threat.proportion"),
        ({"base": {"training": {"lr": 0.1}}}, "base.training.lr"),
        ({"base": {"rounds": "ten"}}, "base.rounds"),
        ({"grid": {"non_iid_degrees": [1.0]}}, "grid.non_iid_degrees[0]"),
        ({"extra": 1}, "extra"),
    ],
)
def test_config_errors_name_the_field(tmp_path, doc, fragment):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        parse_config(path, env={})


def test_unknown_aggregator_lists_valid_values(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"grid": {"aggregators": ["krumm"]}}))
    with pytest.raises(ConfigError, match="fedavg, krum, median, trimmed_mean, ensemble"):
        parse_config(path, env={})


def test_parse_error_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"base": {\n  "rounds": 3,\n}}')
    with pytest.raises(ConfigError, match="line 3, column 1"):
        parse_config(path, env={})


def test_seed_env_override(tmp_path):
    path = write_config(tmp_path)
    assert parse_config(path, env={}).base.master_seed == 0
    assert parse_config(path, env={"FEDSIM_SEED": "42"}).base.master_seed == 42
    with pytest.raises(ConfigError):
        parse_config(path, env={"FEDSIM_SEED": "x"})


def test_none_threat_cells_collapse(tmp_path):
    path = write_config(tmp_path, grid={"threats": ["none", "sign_flip"], "proportions": [0.1, 0.3]})
    ids = [c.cell_id for c in parse_config(path, env={}).cells()]
    assert ids == ["fedavg__none__p0__q0", "fedavg__sign_flip__p0.1__q0", "fedavg__sign_flip__p0.3__q0"]


GRID_2X2 = {"aggregators": ["fedavg", "median"], "threats": ["sign_flip"], "proportions": [0.1, 0.3]}


def test_run_grid_files_resume_and_determinism(tmp_path):
    spec = parse_config(write_config(tmp_path, grid=GRID_2X2), env={})
    out1, out2 = tmp_path / "a", tmp_path / "b"
    first = run_grid(spec, out1)
    assert first.exit_code == 0
    assert len(first.executed) == 4
    assert sorted(p.name for p in out1.iterdir()) == sorted([f"{c.cell_id}.csv" for c in spec.cells()] + ["summary.json"])

    again = run_grid(spec, out1)
    assert again.executed == [] and len(again.skipped) == 4
    assert run_grid(spec, out1, force=True).executed == first.executed

    run_grid(spec, out2, threads=2)
    for p in out1.iterdir():
        assert p.read_bytes() == (out2 / p.name).read_bytes()

    header = (out1 / "fedavg__sign_flip__p0.1__q0.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_HEADER)
    summary = json.loads((out1 / "summary.json").read_text())
    assert summary["grid_size"] == 4
    cell = summary["cells"][0]
    assert {"aggregator", "threat", "proportion", "non_iid_degree", "medians"} <= set(cell)


def test_run_grid_records_precondition_failure(tmp_path):
    spec = parse_config(write_config(tmp_path, base={"aggregator": {"kind": "krum", "f": 1}}), env={})
    outcome = run_grid(spec, tmp_path / "out")
    assert outcome.exit_code == 3
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["cells"][0]["status"] == "aggregation_precondition_failed"


def test_compare_identical_and_disjoint(tmp_path):
    spec = parse_config(write_config(tmp_path, grid=GRID_2X2), env={})
    run_grid(spec, tmp_path / "a")
    report = compare(tmp_path / "a", tmp_path / "a")
    assert len(report["rows"]) == 4
    assert all(r["p_value"] >= 0.9 for r in report["rows"])

    other = parse_config(write_config(tmp_path, grid={"aggregators": ["krum"]}, name="o.json"), env={})
    run_grid(other, tmp_path / "o")
    empty = compare(tmp_path / "a", tmp_path / "o")
    assert empty["rows"] == [] and empty["warnings"]


def _write_cell(path, finals):
    lines = [",".join(CSV_HEADER)]
    for run, acc in enumerate(finals):
        lines.append(f"1,{run},0.1,,")
        lines.append(f"2,{run},{acc},,")
    path.write_text("\n".join(lines) + "\n")


def test_compare_hand_built_pair_matches_stats(tmp_path):
    a_vals = [0.91, 0.88, 0.93, 0.90, 0.87, 0.92]
    b_vals = [0.70, 0.91, 0.65, 0.72, 0.69, 0.75, 0.71]
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _write_cell(tmp_path / "a" / "fedavg__none__p0__q0.csv", a_vals)
    _write_cell(tmp_path / "b" / "fedavg__none__p0__q0.csv", b_vals)
    assert read_cell_csv(tmp_path / "a" / "fedavg__none__p0__q0.csv")[2] == {"test_accuracy": 0.93}
    (row,) = compare(tmp_path / "a", tmp_path / "b")["rows"]
    expected = mann_whitney_u(a_vals, b_vals)
    assert row["u"] == expected.u
    assert row["p_value"] == expected.p_value
    assert row["significant"] is (expected.p_value < 0.05)


def test_compare_across_aggregators(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _write_cell(tmp_path / "a" / "fedavg__sign_flip__p0.3__q0.csv", [0.25, 0.25, 0.26])
    _write_cell(tmp_path / "b" / "krum__sign_flip__p0.3__q0.csv", [0.95, 0.97, 0.96])
    assert compare(tmp_path / "a", tmp_path / "b")["rows"] == []
    (row,) = compare(tmp_path / "a", tmp_path / "b", ignore_axes=["aggregator"])["rows"]
    assert row["median_a"] == 0.25 and row["median_b"] == 0.96


def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("FEDSIM_SEED", raising=False)
    good = write_config(tmp_path, grid={"aggregators": ["fedavg", "krum"]})
    assert cli.main(["validate", str(good)]) == 0
    assert "ok: 2 cells" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    bad.write_text('{"grid": {"aggregators": ["krumm"]}}')
    assert cli.main(["validate", str(bad)]) == 1
    assert "krumm" in capsys.readouterr().err
    assert cli.main(["validate", str(tmp_path / "missing.json")]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["run", str(good)]) == 1  # --out is required

    out = tmp_path / "out"
    assert cli.main(["run", str(good), "--out", str(out), "--threads", "2"]) == 0
    text = capsys.readouterr().out
    assert "grid: 2 cells" in text and "executed 2 cells" in text
    assert cli.main(["run", str(good), "--out", str(out)]) == 0
    assert "executed 0 cells, skipped 2" in capsys.readouterr().out
    assert cli.main(["compare", str(out), str(out)]) == 0

    krum = write_config(tmp_path, base={"aggregator": {"kind": "krum", "f": 1}}, name="k.json")
    assert cli.main(["validate", str(krum)]) == 3
    assert cli.main(["run", str(krum), "--out", str(tmp_path / "k")]) == 3


def test_cli_execution_failure_exit_code(tmp_path):
    path = write_config(tmp_path, base={"dataset": {"csv": str(tmp_path / "gone.csv")}})
    assert cli.main(["run", str(path), "--out", str(tmp_path / "out")]) == 2
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["cells"][0]["status"] == "failed"
