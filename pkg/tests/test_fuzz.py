import json

import pytest

import mutants
from capsim.fuzz import (
    DEFAULT_WEIGHTS,
    FuzzConfig,
    generate,
    run_differential,
    run_trace,
    shrink,
    write_reproducers,
)
from capsim.kernel import KernelConfig
from capsim.trace import VIOLATION_KINDS, TraceEvent, TraceProgram, parse, serialize


def test_generation_is_deterministic():
    config = FuzzConfig(seed=99, events=200)
    assert serialize(generate(config, 3)) == serialize(generate(config, 3))
    assert generate(config, 3) != generate(config, 4)
    assert generate(FuzzConfig(seed=98, events=200), 3) != generate(config, 3)


def test_reports_do_not_depend_on_worker_count():
    config = FuzzConfig(seed=5, traces=24, events=64)
    one = run_differential(config, jobs=1)
    two = run_differential(config, jobs=2)
    assert one.summary() == two.summary()


def test_config_validation():
    with pytest.raises(ValueError):
        FuzzConfig(weights={"alloc": 0})
    with pytest.raises(ValueError):
        FuzzConfig(weights={**DEFAULT_WEIGHTS, "jump": 1})
    with pytest.raises(ValueError):
        FuzzConfig(events=-1)


def test_zero_traces():
    report = run_differential(FuzzConfig(traces=0))
    assert report.ok and report.traces == 0 and report.summary()["verdicts"] == {}


@pytest.mark.parametrize("raw", [True, False])
@pytest.mark.parametrize("cell", [True, False])
def test_small_corpus_is_clean(raw, cell):
    report = run_differential(FuzzConfig(seed=1, traces=60, events=128, kernel=KernelConfig(raw, cell)))
    assert report.discrepancies == []
    # a corpus that mostly passes would say little about revocation
    assert report.rejected_traces >= 0.3 * report.traces


def test_strict_mode_corpus_is_clean():
    report = run_differential(FuzzConfig(seed=2, traces=40, events=128, mode="strict"))
    assert report.ok


def test_corpus_reaches_every_violation_kind():
    report = run_differential(FuzzConfig(seed=3, traces=300, events=128), shrink_failures=False)
    missing = [k for k in VIOLATION_KINDS if k != "pool-exhausted" and not report.verdicts[k]]
    assert missing == []


@pytest.mark.parametrize("kernel", [mutants.NoDisconnect, mutants.SelfNotAncestor], ids=lambda k: k.__name__)
def test_mutant_kernels_are_caught(kernel, tmp_path):
    report = run_differential(FuzzConfig(seed=4, traces=40, events=128), kernel_factory=kernel, max_discrepancies=2)
    assert report.discrepancies
    d = report.discrepancies[0]
    assert d.shrunk is not None and len(d.shrunk) <= 20
    # the reproducer still fails, and the reference kernel passes it
    assert run_trace(d.shrunk, KernelConfig(), kernel_factory=kernel).discrepancies
    assert not run_trace(d.shrunk, KernelConfig()).discrepancies
    paths = write_reproducers(report, tmp_path)
    assert parse(paths[0].read_text()) == d.shrunk
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["discrepancies"][0]["what"] == d.what


def test_shrink_reaches_a_local_minimum():
    program = generate(FuzzConfig(seed=8, events=128))

    def two_drops(p):
        return sum(e.op == "drop" for e in p) >= 2

    assert two_drops(program)
    small = shrink(program, two_drops)
    assert [e.op for e in small] == ["drop", "drop"]
    assert shrink(small, two_drops) == small


def test_shrink_keeps_minimal_traces():
    program = TraceProgram([TraceEvent("alloc", rd=1, addr=0x1000, length=8), TraceEvent("drop", rs1=1)])
    assert shrink(program, lambda p: len(p) == 2) == program


def test_shrink_needs_a_failing_input():
    with pytest.raises(ValueError):
        shrink(TraceProgram([TraceEvent("halt")]), lambda p: False)


def test_shrink_output_satisfies_predicate():
    program = generate(FuzzConfig(seed=21, events=128))

    def has_violation(p):
        return run_trace(p, KernelConfig()).rejected

    assert has_violation(program)
    small = shrink(program, has_violation)
    assert has_violation(small) and len(small) <= 3
