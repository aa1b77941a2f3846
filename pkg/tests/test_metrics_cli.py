import csv
import hashlib
import json

import pytest

from mksim import cli
from mksim.engine import TraceRecord
from mksim.metrics import compute_metrics, emit, recompute
from mksim.scenarios import run_builtin


def test_recovery_emit_files_parse(tmp_path):
    run = run_builtin("recovery-local")
    metrics = emit(run.name, run.records, tmp_path)
    for name in ("trace.csv", "metrics.json", "fig6_series.csv", "fig10_series.csv"):
        assert (tmp_path / name).exists()
    rows = list(csv.DictReader((tmp_path / "fig6_series.csv").open()))
    assert {r["arm"] for r in rows} == {"local", "reboot"}
    assert json.loads((tmp_path / "metrics.json").read_text()) == json.loads(
        json.dumps(metrics, sort_keys=True))


def test_metrics_recompute_from_trace(tmp_path):
    run = run_builtin("recovery-remote")
    emit(run.name, run.records, tmp_path)
    assert recompute(tmp_path) == json.loads((tmp_path / "metrics.json").read_text())


def test_live_and_parsed_traces_give_same_metrics(tmp_path):
    run = run_builtin("isolation")
    metrics = emit(run.name, run.records, tmp_path)
    live = compute_metrics(run.name, run.records)
    live["trace_sha256"] = metrics["trace_sha256"]
    assert json.loads(json.dumps(live, sort_keys=True)) == json.loads(
        (tmp_path / "metrics.json").read_text())


def test_rerun_gives_identical_files(tmp_path):
    hashes = []
    for i in range(2):
        out = tmp_path / str(i)
        run = run_builtin("recovery-local", seed=11)
        emit(run.name, run.records, out)
        hashes.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                       for p in sorted(out.iterdir())})
    assert hashes[0] == hashes[1]


def test_metrics_from_handmade_trace():
    recs = [
        TraceRecord(0, "host", "icmp_req", (("gen", "g"), ("seq", "1"))),
        TraceRecord(10, "0", "icmp_reply", (("gen", "g"), ("seq", "1"), ("rtt", "10"),
                                            ("handler", "0"))),
        TraceRecord(20, "host", "icmp_req", (("gen", "g"), ("seq", "2"))),
        TraceRecord(25, "0", "fault_inject", (("mode", "local"),)),
        TraceRecord(25, "0", "vm_exit", (("reason", "forced"),)),
        TraceRecord(26, "0", "recovery_phase", (("origin", "0"), ("phase", "vm_exit"),
                                                ("cycles", "707"))),
        TraceRecord(40, "host", "icmp_missed", (("gen", "g"), ("seq", "2"))),
        TraceRecord(50, "0", "recovery_done", (("mode", "local"), ("target", "0"))),
        TraceRecord(60, "0", "lock_acquire", (("dev", "n"),)),
        TraceRecord(61, "1", "lock_acquire", (("dev", "n"),)),
    ]
    a = compute_metrics("x", recs)["arms"]["main"]
    assert a["icmp"]["g"] == {"sent": 2, "replies": 1, "missed": 1, "late": 0, "in_order": True,
                              "mean_rtt_cycles": 10.0, "handled_by": {"0": 1}}
    (rec,) = a["recoveries"]
    assert rec["downtime_cycles"] == 25 and rec["missed_icmp"] == 1
    assert rec["exit_reason"] == "forced" and rec["phase_total_cycles"] == 707
    assert a["vm_exits"]["total"] == 1
    assert a["locks"]["mutual_exclusion_violations"] == 1


def test_cli_validate_and_run(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({
        "sandboxes": [{"id": 0}],
        "vcpus": [{"kind": "main", "sandbox": 0, "c_max": 10, "period": 20, "threads": ["t"]}],
        "workloads": [{"type": "forkwait", "sandbox": 0, "thread": "t", "iterations": 3}]}))
    assert cli.main(["validate", str(good)]) == 0
    out = tmp_path / "out"
    assert cli.main(["run", str(good), "--seed", "4", "--out", str(out)]) == 0
    assert (out / "trace.csv").exists()
    assert "forkwait iterations=3" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"sandboxes": [}')
    assert cli.main(["validate", str(bad)]) == 2
    over = tmp_path / "over.json"
    over.write_text(json.dumps({"sandboxes": [{"id": 0}],
                                "vcpus": [{"kind": "main", "sandbox": 0, "c_max": 26,
                                           "period": 100}] * 3}))
    assert cli.main(["validate", str(over)]) == 2
    assert "bound=0.7798" in capsys.readouterr().err
    assert cli.main(["validate", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["demo", "nope"])


def test_cli_runtime_error_exit_code(tmp_path, monkeypatch):
    from mksim.errors import SimError

    def boom(*a, **k):
        raise SimError("simulated failure")

    monkeypatch.setattr(cli, "run_arms", boom)
    assert cli.main(["demo", "forkwait", "--out", str(tmp_path)]) == 1


def test_cli_demo(tmp_path):
    assert cli.main(["demo", "recovery-remote", "--out", str(tmp_path), "--seed", "2"]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["arms"]["remote"]["recoveries"][0]["target"] == 1
