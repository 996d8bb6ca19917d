import csv
import io
import json
from pathlib import Path

import pytest

from fastbft import cli
from fastbft.simnet import MetricsReport

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def test_fault_free_run_writes_metrics(tmp_path, capsys):
    metrics, trace = tmp_path / "m.json", tmp_path / "t.jsonl"
    code = run_cli("run", "--scenario", SCENARIOS / "fault_free.yaml", "--metrics", metrics, "--trace", trace)
    assert code == 0
    rep = json.loads(metrics.read_text())
    assert rep["completed"] == rep["expected"] == 10
    assert rep["messages_per_request"] == 11
    assert rep["safety"] is True
    assert all(json.loads(line)["tag"] for line in trace.read_text().splitlines())
    assert capsys.readouterr().out.startswith("ok:")


def test_crash_primary_scenario_records_one_view_change(tmp_path):
    metrics = tmp_path / "m.json"
    assert run_cli("run", "--scenario", SCENARIOS / "crash_primary.yaml", "--metrics", metrics) == 0
    assert json.loads(metrics.read_text())["view_changes"] == 1


@pytest.mark.parametrize("name", ["wrong_share", "fallback", "passive_reboot"])
def test_bundled_scenarios_pass(tmp_path, name):
    assert run_cli("run", "--scenario", SCENARIOS / f"{name}.yaml", "--metrics", tmp_path / "m.json") == 0


def test_bad_size_names_the_constraint(tmp_path, capsys):
    code = run_cli("run", "--scenario", SCENARIOS / "bad_size.yaml", "--metrics", tmp_path / "m.json")
    assert code == 2
    assert "n must equal 2f+1" in capsys.readouterr().err


def test_schema_error_names_the_field_path(tmp_path, capsys):
    path = tmp_path / "s.yaml"
    path.write_text("n: 5\nfaults:\n  - {target: -1, kind: crash}\n")
    assert run_cli("run", "--scenario", path, "--metrics", tmp_path / "m.json") == 2
    assert "faults/0/target" in capsys.readouterr().err


def test_unknown_field_is_rejected(tmp_path, capsys):
    path = tmp_path / "s.yaml"
    path.write_text("n: 5\nreplicas: 5\n")
    assert run_cli("run", "--scenario", path, "--metrics", tmp_path / "m.json") == 2
    assert "replicas" in capsys.readouterr().err


def test_missing_file_is_a_usage_error(tmp_path):
    assert run_cli("run", "--scenario", tmp_path / "nope.yaml", "--metrics", tmp_path / "m.json") == 2


def test_incomplete_run_exits_3(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("n: 5\nrequests: 10\nhorizon: 3\n")
    assert run_cli("run", "--scenario", path, "--metrics", tmp_path / "m.json") == 3


def test_invariant_violation_exits_1(tmp_path, monkeypatch, capsys):
    real_run = cli.run

    def broken(scn):
        res = real_run(scn)
        bad = MetricsReport(**{**res.report.to_dict(), "safety": False, "liveness": False, "violation": "prefix violated at event 7: x"})
        res.report = bad
        return res

    monkeypatch.setattr(cli, "run", broken)
    code = run_cli("run", "--scenario", SCENARIOS / "fault_free.yaml", "--metrics", tmp_path / "m.json")
    assert code == 1
    assert "prefix" in capsys.readouterr().err


def test_seed_from_environment(tmp_path, monkeypatch):
    path = tmp_path / "s.yaml"
    path.write_text("n: 5\nrequests: 3\n")
    outs = {}
    for label, seed in (("env", "7"), ("other", "8")):
        monkeypatch.setenv(cli.SEED_ENV, seed)
        run_cli("run", "--scenario", path, "--metrics", tmp_path / "m.json", "--trace", tmp_path / f"{label}.jsonl")
        outs[label] = (tmp_path / f"{label}.jsonl").read_text()
    monkeypatch.delenv(cli.SEED_ENV)
    run_cli("run", "--scenario", path, "--seed", 7, "--metrics", tmp_path / "m.json", "--trace", tmp_path / "flag.jsonl")
    assert outs["env"] == (tmp_path / "flag.jsonl").read_text()
    assert outs["env"] != outs["other"]


def test_bad_seed_environment_is_a_usage_error(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    assert run_cli("run", "--scenario", SCENARIOS / "fault_free.yaml", "--metrics", tmp_path / "m.json") == 2


def read_sweep(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# generated_at: ")
    return lines, list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def test_sweep_messages_per_request_matches_closed_form(tmp_path):
    out = tmp_path / "sweep.csv"
    assert run_cli("sweep", "--n-list", "5,9,17", "--faults", "none", "--seeds", 10, "--requests", 3, "--out", out) == 0
    _, rows = read_sweep(out)
    assert [int(r["n"]) for r in rows] == [5, 9, 17]
    for r in rows:
        assert float(r["msgs_per_request"]) == 5 * int(r["f"]) + 1
        assert int(r["safe_runs"]) == int(r["live_runs"]) == 10


def test_sweep_wrong_share_profile_has_one_new_tree_per_run(tmp_path):
    out = tmp_path / "sweep.csv"
    assert run_cli("sweep", "--n-list", "5,7", "--faults", "one-wrong-share", "--seeds", 4, "--requests", 3, "--out", out) == 0
    _, rows = read_sweep(out)
    assert [float(r["new_trees"]) for r in rows] == [1.0, 1.0]


def test_sweep_is_reproducible_apart_from_the_header(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        run_cli("sweep", "--n-list", "5", "--faults", "crash-primary", "--seeds", 2, "--requests", 2, "--out", out)
    assert read_sweep(a)[0][1:] == read_sweep(b)[0][1:]


@pytest.mark.parametrize("raw", ["", ",", " , "])
def test_empty_n_list_is_a_usage_error(raw, capsys):
    assert run_cli("sweep", "--n-list", raw) == 2
    assert "n-list" in capsys.readouterr().err


def test_sweep_rejects_invalid_n(capsys):
    assert run_cli("sweep", "--n-list", "4", "--seeds", 1) == 2
    assert "2f+1" in capsys.readouterr().err


def test_sweep_to_stdout(capsys):
    assert run_cli("sweep", "--n-list", "5", "--seeds", 1, "--requests", 1) == 0
    out = capsys.readouterr().out
    assert out.startswith("# generated_at:") and "msgs_per_request" in out
