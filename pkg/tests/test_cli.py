import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from capsim.cli import main

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "src" / "capsim" / "scenarios"


def capsim(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_run_fig3_text(capsys):
    code, out, _ = capsim(capsys, "run", SCENARIOS / "fig3.cap")
    assert code == 2
    assert "violation at event 4 (line 13): invalid-capability-store" in out
    assert "parent chain 1 -> 2 -> 3" in out


def test_run_fig3_json_schema(capsys):
    code, out, _ = capsim(capsys, "run", SCENARIOS / "fig3.cap", "--report", "json")
    assert code == 2
    body = json.loads(out)
    assert {"version", "trace", "events", "violations", "stats"} <= set(body)
    assert body["version"] == 1 and body["events"] == 5
    (v,) = body["violations"]
    assert {"event_index", "kind", "cap", "parents", "addr", "width", "message"} <= set(v)
    assert (v["event_index"], v["kind"], v["cap"], v["parents"]) == (4, "invalid-capability-store", 3, [1, 2, 3])
    assert body["stats"]["caps_created"] == 3 and body["stats"]["caps_invalidated"] == 1
    assert body["stats"]["caps_invalidated"] <= body["stats"]["caps_created"]


def test_run_use_after_free(capsys):
    code, out, _ = capsim(capsys, "run", SCENARIOS / "uaf.cap", "--report", "json")
    assert code == 2
    assert [v["kind"] for v in json.loads(out)["violations"]] == ["invalid-capability-store"]


def test_run_clean_trace(capsys, tmp_path):
    path = tmp_path / "hello.cap"
    path.write_text("alloc r1, 0x1000, 8\nsd r0, 0(r1), 8\nld r2, 0(r1), 8\nhalt\n")
    code, out, _ = capsim(capsys, "run", path)
    assert code == 0 and out.rstrip().endswith("ok")


def test_run_continue_reports_every_violation(capsys, tmp_path):
    path = tmp_path / "two.cap"
    # continue strips r1's provenance, so the second drop goes through a copy
    path.write_text("alloc r1, 0x1000, 8\nmv r3, r1\ndrop r1\nld r2, 0(r1), 8\ndrop r3\n")
    code, out, _ = capsim(capsys, "run", path, "--on-violation", "continue", "--report", "json")
    assert code == 2
    assert [v["kind"] for v in json.loads(out)["violations"]] == ["invalid-capability-load", "drop-invalid"]


def test_run_strict_mode_and_pool_size(capsys, tmp_path):
    path = tmp_path / "foreign.cap"
    path.write_text("li r1, 0x3000\nsd r0, 0(r1), 8\n")
    assert capsim(capsys, "run", path)[0] == 0
    assert capsim(capsys, "run", path, "--mode", "strict")[0] == 2
    path.write_text("alloc r1, 0x1000, 8\nalloc r2, 0x2000, 8\n")
    code, out, _ = capsim(capsys, "run", path, "--pool-size", "1")
    assert code == 2 and "pool-exhausted" in out


@pytest.mark.parametrize(
    "text, located",
    [("sd r0, 0(r9)\n", ":1:1: operand-arity"), ("halt\nfly r1\n", ":2:1: unknown-opcode")],
)
def test_run_parse_error(capsys, tmp_path, text, located):
    path = tmp_path / "bad.cap"
    path.write_text(text)
    code, out, err = capsim(capsys, "run", path)
    assert code == 1 and f"bad.cap{located}" in err and out == ""


def test_usage_errors(capsys, tmp_path):
    assert capsim(capsys, "run", tmp_path / "missing.cap")[0] == 1
    assert capsim(capsys, "run")[0] == 1
    assert capsim(capsys, "frobnicate")[0] == 1
    assert capsim(capsys, "run", SCENARIOS / "fig3.cap", "--pool-size", "0")[0] == 1
    assert capsim(capsys, "fuzz", "--kernel", "nocolon")[0] == 1
    assert capsim(capsys, "--help")[0] == 0


def test_check_corpus(capsys):
    code, out, _ = capsim(capsys, "check", SCENARIOS)
    assert code == 0, out
    assert out.rstrip().endswith("0 mismatches")


@pytest.mark.parametrize("flag, scenario", [("--no-raw-relax", "raw_interleave"), ("--no-cell-relax", "cell_siblings")])
def test_relaxation_controls_flip(capsys, flag, scenario):
    assert capsim(capsys, "check", SCENARIOS / f"{scenario}.cap")[0] == 0
    code, out, _ = capsim(capsys, "check", SCENARIOS / f"{scenario}.cap", flag)
    assert code == 2 and "got invalid-capability-store" in out


def test_check_flipped_expectation(capsys, tmp_path):
    text = (SCENARIOS / "fig3.cap").read_text().replace("expect violation invalid-capability-store", "expect ok")
    path = tmp_path / "fig3.cap"
    path.write_text(text)
    code, out, _ = capsim(capsys, "check", path)
    assert code == 2
    assert "fig3.cap:13: expected ok, got invalid-capability-store" in out


def test_check_directory_with_malformed_file(capsys, tmp_path):
    shutil.copy(SCENARIOS / "fig3.cap", tmp_path / "a.cap")
    (tmp_path / "b.cap").write_text("alloc r1, 0x1000, 8\nexpect\n")
    code, _, err = capsim(capsys, "check", tmp_path)
    assert code == 1 and "b.cap:2:1: syntax-error" in err


def test_check_empty_directory(capsys, tmp_path):
    assert capsim(capsys, "check", tmp_path)[0] == 1


def test_fuzz_clean_and_zero(capsys, tmp_path):
    code, out, _ = capsim(capsys, "fuzz", "--seed", 42, "--traces", 20, "--events", 64, "--out", tmp_path)
    assert code == 0 and "no discrepancies" in out
    assert "invalid-capability-store" in out
    code, out, _ = capsim(capsys, "fuzz", "--traces", 0, "--out", tmp_path)
    assert code == 0 and "0 traces" in out
    assert list(tmp_path.iterdir()) == []


def test_fuzz_seed_from_environment(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("CAPSIM_SEED", "77")
    code, out, _ = capsim(capsys, "fuzz", "--seed", 1, "--traces", 3, "--events", 16, "--out", tmp_path)
    assert code == 0 and out.startswith("seed 77:")
    monkeypatch.setenv("CAPSIM_SEED", "x")
    assert capsim(capsys, "fuzz", "--traces", 1)[0] == 1


def test_fuzz_mutant_kernel_exits_2_with_shrunk_reproducer(tmp_path):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join([str(ROOT / "tests"), str(ROOT / "src")]))
    env.pop("CAPSIM_SEED", None)
    out = tmp_path / "out"
    proc = subprocess.run(
        [sys.executable, "-m", "capsim.cli", "fuzz", "--seed", "42", "--traces", "5", "--events", "128",
         "--kernel", "mutants:NoDisconnect", "--out", str(out)],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 2, proc.stdout + proc.stderr
    repros = sorted(out.glob("*.cap"))
    assert repros and (out / "summary.json").exists()
    assert all(len([l for l in p.read_text().splitlines() if not l.startswith("#")]) <= 20 for p in repros)
