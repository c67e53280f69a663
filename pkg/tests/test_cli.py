import json
from pathlib import Path

import pytest

from qfhe import cli, orchestrator as orch

GOLDEN = Path(__file__).parent / "golden" / "teleport_demo.json"


def run(*argv):
    status, rep = cli.dispatch(list(argv))
    return status, rep


def test_keygen_writes_keys(tmp_path):
    status, rep = run("keygen", "--out", str(tmp_path))
    assert status == cli.EXIT_OK
    assert rep.summary["chain"] == [1073741953, 1048193, 769]
    assert (tmp_path / "public.key").stat().st_size == rep.summary["public_key_bytes"]
    assert (tmp_path / "report.txt").exists()


def test_teleport_demo_matches_golden():
    status, rep = run("teleport-demo", "--format", "json")
    assert status == cli.EXIT_OK
    got = json.loads(cli.render_report(rep, "json"))
    got.pop("timings")
    want = json.loads(GOLDEN.read_text())
    assert got == want


def test_teleport_demo_summary():
    _, rep = run("teleport-demo", "--state", "1")
    s = rep.summary
    assert s["total_analytic_noise"] == 18 and s["tracker"] == 18
    assert s["trace_distance"] < 1e-3
    assert s["consistency_flag"] is True
    assert [r[-1] for r in rep.rows] == [3, 9, 12, 15, 18]


def test_render_is_stable():
    _, a = run("noise-report", "teleport")
    _, b = run("noise-report", "teleport")
    for fmt in ("json", "text"):
        assert cli.render_report(a, fmt) == cli.render_report(b, fmt)
    text = cli.render_report(a, "text").decode()
    assert "q >= 4*N_ops*sigma = 72" in text
    with pytest.raises(ValueError):
        cli.render_report(a, "yaml")


def test_json_roundtrip_keeps_report_fields():
    _, rep = run("quotient", "x⁻¹·(e·x)")
    data = json.loads(cli.render_report(rep, "json"))
    back = cli.RunReport(**data)
    assert cli.render_report(back, "json") == cli.render_report(rep, "json")
    assert data["summary"]["normal_form"] == "e"


def test_noise_report_from_file_and_exhaustion(tmp_path):
    prog = tmp_path / "long.txt"
    prog.write_text("CNOT 0 1\n" * 4000)
    status, rep = run("noise-report", str(prog), "--preset", "tiny")
    assert status == cli.EXIT_NOISE
    assert rep.summary["final_tracker"] == "exhausted"
    assert "3921" in rep.notes["error"]
    ok_prog = tmp_path / "short.txt"
    ok_prog.write_text("CNOT 0 1\n" * 3000)
    status, rep = run("noise-report", str(ok_prog), "--preset", "tiny")
    assert status == cli.EXIT_OK and rep.refreshes == [1365, 2661]


def test_weak_amplitude_reports_discrepancy():
    status, rep = run("weak-amplitude", "--state", "1")
    assert status == cli.EXIT_OK
    assert rep.preset == "teleport"
    assert rep.summary["accept"] is True and rep.summary["oracle_accept"] is True
    assert rep.notes == {"s_formula": 66, "s_printed": 44, "s_log2": 10}


def test_kb_demo_default_and_file(tmp_path):
    status, rep = run("kb-demo")
    assert status == cli.EXIT_OK
    assert rep.summary["truth"] == [1]
    assert [r[:2] for r in rep.rows] == [[True, True], [True, False], [False, True], [False, False]]
    path = tmp_path / "kb.json"
    path.write_text(json.dumps([{"fact": "R(a)"}, {"implies": ["P", "Q"]}]))
    _, rep = run("kb-demo", "--kb", str(path))
    assert rep.summary["truth"] == [0]


def test_quotient_nonconfluence(tmp_path):
    rules = tmp_path / "rules.json"
    rules.write_text(json.dumps([{"lhs": "x·y", "rhs": "y·x"}]))
    status, rep = run("quotient", "a·b", "--rules", str(rules))
    assert status == cli.EXIT_NOISE
    assert set(rep.notes) >= {"error", "steps", "last_terms"}


def test_pipeline_demo_writes_verifiable_ledger(tmp_path):
    status, rep = run("pipeline-demo", "--nodes", "2", "--out", str(tmp_path))
    assert status == cli.EXIT_OK
    assert rep.summary["audit_ok"] and rep.summary["matches_monolithic"]
    assert rep.summary["records"] == 6
    assert orch.verify_file(tmp_path / "ledger.bin") == (True, None)


def test_bench_shape():
    status, rep = run("bench", "--reps", "2")
    assert status == cli.EXIT_OK
    assert [r[0] for r in rep.rows] == ["H", "S", "X", "CNOT", "CZ"]


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.conf"
    cfg.write_text("# demo\npreset = tiny\nsigma = 5\n")
    _, rep = run("keygen", "--config", str(cfg))
    assert rep.preset == "tiny" and rep.summary["sigma"] == 5
    _, rep = run("keygen", "--config", str(cfg), "--sigma", "4")
    assert rep.summary["sigma"] == 4
    # command default sits under the config file
    cfg.write_text("preset = toy\n")
    _, rep = run("weak-amplitude", "--config", str(cfg), "--state", "0")
    assert rep.preset == "toy"


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["keygen", "--preset", "huge"],
    ["keygen", "--seed", "xyz"],
    ["noise-report", "/nonexistent/prog.txt"],
])
def test_usage_errors(argv):
    status, rep = run(*argv)
    assert status == cli.EXIT_USAGE and rep is None


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "bad.conf"
    cfg.write_text("colour = blue\n")
    assert run("keygen", "--config", str(cfg)) == (cli.EXIT_USAGE, None)


def test_main_prints_text(capsys):
    assert cli.main(["quotient", "e·e"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("command: quotient")
