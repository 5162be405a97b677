"""Command-line behaviors: exit codes, determinism, composition."""

import glob
import json
import os
import subprocess
import sys

import pytest

from stwa.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIOS = sorted(glob.glob(os.path.join(ROOT, "scenarios", "*.scn")))


def run_cli(args, env_seed=None, monkeypatch=None):
    if monkeypatch is not None:
        if env_seed is None:
            monkeypatch.delenv("STWA_SEED", raising=False)
        else:
            monkeypatch.setenv("STWA_SEED", str(env_seed))
    return main(args)


def test_scenarios_present():
    assert len(SCENARIOS) == 9


@pytest.mark.parametrize("path", SCENARIOS, ids=[os.path.basename(p) for p in SCENARIOS])
def test_run_then_check_exits_clean(path, tmp_path, monkeypatch, capsys):
    out = tmp_path / "t.jsonl"
    assert run_cli(["run", path, "--out", str(out)], monkeypatch=monkeypatch) == 0
    assert run_cli(["check", str(out)]) == 0
    text = capsys.readouterr().out
    assert "trace verdict: ok" in text


def test_run_is_deterministic(tmp_path, monkeypatch):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    scn = os.path.join(ROOT, "scenarios", "happy.scn")
    run_cli(["run", scn, "--out", str(a)], monkeypatch=monkeypatch)
    run_cli(["run", scn, "--out", str(b)], monkeypatch=monkeypatch)
    assert a.read_bytes() == b.read_bytes()


def test_seed_precedence(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "happy.scn")  # header seed 7
    out = tmp_path / "t.jsonl"

    def meta_seed():
        return json.loads(out.read_text().splitlines()[0])["seed"]

    run_cli(["run", scn, "--out", str(out)], monkeypatch=monkeypatch)
    assert meta_seed() == 7
    run_cli(["run", scn, "--out", str(out)], env_seed=99, monkeypatch=monkeypatch)
    assert meta_seed() == 99
    monkeypatch.setenv("STWA_SEED", "99")
    assert run_cli(["run", scn, "--out", str(out), "--seed", "123"]) == 0
    assert meta_seed() == 123


def test_bad_env_seed_is_usage_error(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "happy.scn")
    monkeypatch.setenv("STWA_SEED", "banana")
    assert main(["run", scn, "--out", str(tmp_path / "t.jsonl")]) == 2


def test_malformed_scenario_names_line(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("actor kdc kdc\nfrobnicate everything\n")
    assert main(["run", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_scenario_file(capsys):
    assert main(["run", "/nonexistent/x.scn"]) == 2


def test_missing_trace_file(capsys):
    assert main(["check", "/nonexistent/t.jsonl"]) == 2


def test_check_failing_trace_exits_one(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "happy.scn")
    out = tmp_path / "t.jsonl"
    run_cli(["run", scn, "--out", str(out)], monkeypatch=monkeypatch)
    lines = out.read_text().splitlines()
    secret = next(json.loads(l) for l in lines
                  if '"kind":"secret"' in l and '"session_key"' in l)
    leak = {"kind": "delivered", "seq": 9999, "tick": 9999, "from": "x",
            "to": "y", "channel": "open", "frame_hex": secret["value_hex"],
            "outcome": "progress:planted"}
    lines.insert(len(lines) - 1, json.dumps(leak, sort_keys=True, separators=(",", ":")))
    out.write_text("\n".join(lines) + "\n")
    assert main(["check", str(out)]) == 1
    assert "FAIL secrecy" in capsys.readouterr().out


def test_check_truncated_trace_is_usage_error(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "happy.scn")
    out = tmp_path / "t.jsonl"
    run_cli(["run", scn, "--out", str(out)], monkeypatch=monkeypatch)
    lines = out.read_text().splitlines()
    out.write_text("\n".join(lines[:-1]) + "\n")  # drop the end row
    assert main(["check", str(out)]) == 2


def test_check_json_verdict(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "eavesdrop.scn")
    out = tmp_path / "t.jsonl"
    run_cli(["run", scn, "--out", str(out)], monkeypatch=monkeypatch)
    assert main(["check", str(out), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert doc["ok"] is True
    assert [c["name"] for c in doc["checks"]] == [
        "secrecy", "agreement", "freshness", "privacy"]


def test_snapshot_dump(tmp_path, monkeypatch):
    scn = os.path.join(ROOT, "scenarios", "happy.scn")
    out, snap = tmp_path / "t.jsonl", tmp_path / "state.json"
    run_cli(["run", scn, "--out", str(out), "--snapshot", str(snap)],
            monkeypatch=monkeypatch)
    doc = json.loads(snap.read_text())
    assert "cks" in doc and "users" in doc["cks"]["registry"]
    assert doc["kdc"]["device_log"]


def test_crypto_mode_override(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "happy.scn")
    out = tmp_path / "t.jsonl"
    run_cli(["run", scn, "--out", str(out), "--crypto-mode", "opaque"],
            monkeypatch=monkeypatch)
    meta = json.loads(out.read_text().splitlines()[0])
    assert meta["crypto_mode"] == "opaque"
    assert main(["check", str(out)]) == 0


def test_livelock_budget_exit(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "happy.scn")
    assert run_cli(["run", scn, "--out", str(tmp_path / "t.jsonl"),
                    "--max-steps", "3"], monkeypatch=monkeypatch) == 3


def test_synflood_placeholder_exit(tmp_path, capsys):
    scn = tmp_path / "flood.scn"
    scn.write_text(
        "actor kdc kdc\nactor cks cks\nactor adversary eve\nattack synflood\n")
    assert main(["run", str(scn)]) == 3
    assert "not implemented" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["--help"]) == 0


def test_demo_counts(monkeypatch, capsys):
    monkeypatch.delenv("STWA_SEED", raising=False)
    assert main(["demo"]) == 0
    text = capsys.readouterr().out
    assert text.count("confirmed") == 4
    assert "MISSING" not in text
    for phase, steps in (("initialization", 3), ("registration", 5),
                         ("connection", 4), ("service", 10)):
        section = text.split(f"[{phase}]")[1].split("\n\n")[0]
        numbered = [l for l in section.splitlines()
                    if l.strip() and l.strip()[0].isdigit() and ". " in l]
        assert len(numbered) == steps, f"{phase}: {numbered}"


def test_console_script_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "stwa.cli", "demo"],
        capture_output=True, text=True,
        env={**os.environ, "STWA_SEED": ""},
    )
    assert proc.returncode == 0
    assert "walkthrough" in proc.stdout


def test_run_writes_to_stdout_without_out(tmp_path, monkeypatch, capsys):
    scn = os.path.join(ROOT, "scenarios", "otp_reuse.scn")
    assert run_cli(["run", scn], monkeypatch=monkeypatch) == 0
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[0])["kind"] == "meta"
    assert json.loads(lines[-1])["kind"] == "end"
