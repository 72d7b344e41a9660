import csv
import json

import pytest

from infolat.cli import main


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_explain_config_prints_materialized_defaults(capsys):
    assert main(["explain-config", "--scenario", "intersection"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["scenario"]["params"]["n_vehicles"] == 520 and cfg["version"] == 1


def test_run_platoon_fixed_point(tmp_path, capsys):
    out = tmp_path / "p"
    rc = main(["run-platoon", "--policy", "fixed", "--repetitions", "4", "--runs", "3", "--jobs", "2",
               "--out", str(out), "--trace"])
    assert rc == 0
    row = _csv(out / "fig5.csv")[0]
    assert row["label"] == "k=4" and row["repetitions"] == "4"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["policy"]["repetitions"] == 4 and summary["version"]
    assert len(summary["runs"]) == 3 and len(_csv(out / "crashes.csv")) == 3
    assert _csv(out / "age_trace.csv") and _csv(out / "mac_trace.csv")
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_pretrain_then_smart_lite_run(tmp_path):
    ck = tmp_path / "ck" / "pre.json"
    assert main(["pretrain", "--pretrain-out", str(ck), "--radios", "12"]) == 0
    meta = json.loads(ck.read_text())["meta"]
    assert meta["radios"] == 12 and meta["converged"]
    out = tmp_path / "s"
    assert main(["run-platoon", "--policy", "smart-lite", "--policy-in", str(ck), "--runs", "2", "--out", str(out)]) == 0
    assert _csv(out / "fig5.csv")[0]["label"] == "smart-lite"


def test_missing_config_exits_2_without_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["run-platoon", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config"
    assert not out.exists() and list(tmp_path.iterdir()) == []


@pytest.mark.parametrize("argv", [
    ["run-platoon", "--bogus"],
    ["run-platoon", "--jobs", "0"],
    ["run-platoon", "--policy-in", "x.json"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert main(argv + (["--out", str(tmp_path / "o")] if argv[0] == "run-platoon" and len(argv) > 2 else [])) == 2


def test_runtime_failure_exits_1_and_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run-platoon", "--repetitions", "500", "--runs", "2", "--out", str(out)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "run" and "seed" in err
    assert not out.exists()


def test_bad_config_value_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": {"kind": "platoon", "params": {"target_gapp": 3}}}))
    assert main(["run-platoon", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_intersection_baseline_only_and_pairing(tmp_path):
    out = tmp_path / "lights"
    assert main(["run-intersection", "--mode", "lights", "--runs", "2", "--out", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["normalized_trip_time"] == 1.0
    out = tmp_path / "fixed"
    assert main(["run-intersection", "--runs", "2", "--jobs", "2", "--out", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["paired_arrivals_verified"] and s["normalized_trip_time"] < 1.0
    trips = _csv(out / "trips.csv")
    by_mode = {}
    for r in trips:
        by_mode.setdefault(r["mode"], []).append((r["seed"], r["vehicle"], r["arrival_ms"]))
    assert by_mode["mode4"] == by_mode["lights"]


def test_policy_bench_csv(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["policy-bench", "--out", str(a)]) == 0
    assert main(["policy-bench", "--out", str(b)]) == 0
    assert (a / "bench.csv").read_bytes() == (b / "bench.csv").read_bytes()
    rows = _csv(a / "bench.csv")
    rr = next(r for r in rows if r["policy"] == "round_robin")
    assert float(rr["avg_age"]) == pytest.approx(1.5) and rr["oracle_age"] != ""


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("INFOLAT_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["policy-bench"]) == 0
    assert (tmp_path / "env" / "policy-bench" / "bench.csv").exists()
    # reruns replace the directory whole
    assert main(["policy-bench", "--seed", "3"]) == 0
    assert sorted(p.name for p in (tmp_path / "env").iterdir()) == ["policy-bench"]
