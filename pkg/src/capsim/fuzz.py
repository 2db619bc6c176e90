"""Seeded trace generation, differential execution and shrinking."""
from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from .kernel import Kernel, KernelConfig, Permission
from .log import OK
from .machine import Machine
from .oracle import check_exclusive_access, check_well_nested, naive_run, oracle_step, OracleState
from .trace import TraceEvent, TraceProgram, serialize

DEFAULT_WEIGHTS = {
    "alloc": 6,
    "borrow": 18,
    "drop": 3,
    "sd": 20,
    "ld": 16,
    "spill": 6,
    "reload": 6,
    "mv": 4,
    "add": 3,
    "addi": 3,
    "li": 1,
    "forge": 1,
}
BORROW_WEIGHTS = {"mut": 4, "imm": 3, "raw-mut": 2, "raw-imm": 1, "cell": 2}
DEFAULT_POOL = (0x1000, 0x1040, 0x2000)
ALLOC_LENGTHS = (8, 16, 32, 64)
PTR_REGS = tuple(range(1, 13))
SCALAR_REGS = (13, 14, 15)
STACK_REG = 30
STACK_BASE = 0x8000
STACK_SLOTS = 8


@dataclass(frozen=True)
class FuzzConfig:
    seed: int = 0
    events: int = 128
    traces: int = 100
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    kernel: KernelConfig = KernelConfig()
    address_pool: tuple = DEFAULT_POOL
    mode: str = "compat"
    end_to_end: bool = True

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()) or not any(w > 0 for w in self.weights.values()):
            raise ValueError("weights must be nonnegative with at least one positive")
        unknown = set(self.weights) - set(DEFAULT_WEIGHTS)
        if unknown:
            raise ValueError(f"unknown generator ops: {sorted(unknown)}")
        if self.events < 0 or self.traces < 0:
            raise ValueError("events and traces must be nonnegative")

    def trace_seed(self, index: int) -> int:
        return (self.seed * 1_000_003 + index) & ((1 << 64) - 1)


@dataclass
class Discrepancy:
    seed: int
    index: int
    what: str
    step: Optional[int]
    kernel_verdict: object
    oracle_verdict: object
    trace: TraceProgram
    shrunk: Optional[TraceProgram] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "index": self.index,
            "what": self.what,
            "step": self.step,
            "kernel_verdict": repr(self.kernel_verdict),
            "oracle_verdict": repr(self.oracle_verdict),
            "events": len(self.trace),
            "shrunk_events": None if self.shrunk is None else len(self.shrunk),
        }


# -- generation -------------------------------------------------------------


class _Gen:
    """Builds a trace while executing it, so operands track real capabilities."""

    def __init__(self, rng: random.Random, config: FuzzConfig):
        self.rng = rng
        self.config = config
        self.machine = Machine(config.kernel, mode=config.mode, on_violation="continue", record=False)
        self.recent: list[int] = []
        ops, weights = zip(*((k, v) for k, v in config.weights.items() if v > 0))
        self.ops, self.op_weights = ops, weights

    def bounds(self, r):
        prov = self.machine.regs[r].provenance
        if not prov:
            return None
        node = self.machine.kernel.nodes[prov[-1]]
        return node.lo, node.hi, node.perm is not Permission.NA

    def pick_ptr(self):
        held = {r: b for r in PTR_REGS for b in [self.bounds(r)] if b}
        if not held:
            return None
        valid = [r for r in held if held[r][2]]
        pool = valid if valid and self.rng.random() < 0.8 else list(held)
        # bias towards recently written registers: they hold the deepest borrows
        ranked = [r for r in reversed(self.recent) if r in pool]
        if ranked and self.rng.random() < 0.6:
            return ranked[min(int(self.rng.expovariate(1.0)), len(ranked) - 1)]
        return self.rng.choice(sorted(pool))

    def dest(self):
        return self.rng.choice(PTR_REGS)

    def wrote(self, r):
        if r in self.recent:
            self.recent.remove(r)
        self.recent.append(r)

    def subrange(self, lo, hi):
        rng = self.rng
        if rng.random() < 0.05:
            return lo, hi + 8  # deliberately too wide
        if hi - lo >= 16 and rng.random() < 0.7:
            cells = (hi - lo) // 8
            a = rng.randrange(cells)
            b = rng.randrange(a + 1, cells + 1)
            return lo + 8 * a, lo + 8 * b
        a = rng.randrange(lo, hi)
        return a, rng.randrange(a + 1, hi + 1)

    def access_target(self, lo, hi):
        rng = self.rng
        size = hi - lo
        width = 8 if rng.random() < 0.7 else rng.choice((1, 2, 4))
        if rng.random() < 0.06:
            return rng.choice((size - 4, size)), width  # straddles or leaves the bounds
        if width > size:
            width = 1
        if width == 8:
            offs = list(range(0, size - 7, 8)) or [0]
            return rng.choice(offs), width
        return rng.randrange(0, size - width + 1), width

    def event(self) -> TraceEvent:
        ev = self._event()
        self.machine.exec(ev)
        return ev

    def _event(self) -> TraceEvent:
        rng = self.rng
        op = rng.choices(self.ops, self.op_weights)[0]
        src = self.pick_ptr()
        if src is None and op in ("borrow", "drop", "sd", "ld", "spill", "mv", "add", "addi"):
            op = "alloc"
        spilled = sorted(a for a in self.machine.memory.slots if STACK_BASE <= a < STACK_BASE + 8 * STACK_SLOTS)
        if op == "reload" and not spilled:
            op = "alloc"
        if src is not None:
            lo, hi, _ = self.bounds(src)

        if op == "alloc":
            rd = self.dest()
            base = rng.choice(self.config.address_pool)
            length = rng.choice(ALLOC_LENGTHS)
            kind = rng.choices((None, "cell", "raw"), (10, 1, 1))[0]
            self.wrote(rd)
            return TraceEvent("alloc", rd=rd, addr=base, length=length, kind=kind)
        if op == "borrow":
            kind = rng.choices(list(BORROW_WEIGHTS), list(BORROW_WEIGHTS.values()))[0]
            rd = src if rng.random() < 0.3 else self.dest()
            if rng.random() < 0.45:
                blo, bhi = self.subrange(lo, hi)
                self.wrote(rd)
                return TraceEvent("borrow", rd=rd, rs1=src, kind=kind, lo=blo, hi=bhi)
            self.wrote(rd)
            return TraceEvent("borrow", rd=rd, rs1=src, kind=kind)
        if op == "drop":
            return TraceEvent("drop", rs1=src)
        if op in ("sd", "ld"):
            off, width = self.access_target(lo, hi)
            off += lo - self.machine.regs[src].value
            if op == "sd":
                value = rng.choice(SCALAR_REGS + (0,) + PTR_REGS)
                return TraceEvent("sd", rs2=value, rs1=src, offset=off, width=width)
            rd = rng.choice(SCALAR_REGS) if rng.random() < 0.5 else self.dest()
            self.wrote(rd)
            return TraceEvent("ld", rd=rd, rs1=src, offset=off, width=width)
        if op == "spill":
            slot = rng.randrange(STACK_SLOTS)
            return TraceEvent("sd", rs2=src, rs1=STACK_REG, offset=8 * slot, width=8)
        if op == "reload":
            addr = rng.choice(spilled)
            rd = self.dest()
            self.wrote(rd)
            return TraceEvent("ld", rd=rd, rs1=STACK_REG, offset=addr - STACK_BASE, width=8)
        if op == "mv":
            rd = self.dest()
            self.wrote(rd)
            return TraceEvent("mv", rd=rd, rs1=src)
        if op == "add":
            rd = self.dest()
            other = rng.choice(PTR_REGS + SCALAR_REGS)
            self.wrote(rd)
            return TraceEvent("add", rd=rd, rs1=src, rs2=other)
        if op == "addi":
            rd = self.dest()
            step = rng.choice((0, 8, -8))
            self.wrote(rd)
            return TraceEvent("addi", rd=rd, rs1=src, imm=step)
        if op == "li":
            rd = rng.choice(SCALAR_REGS)
            return TraceEvent("li", rd=rd, imm=rng.randrange(256))
        # forge: a plain integer that happens to equal an allocation address
        rd = self.dest()
        self.wrote(rd)
        return TraceEvent("li", rd=rd, imm=rng.choice(self.config.address_pool))


def generate(config: FuzzConfig, index: int = 0) -> TraceProgram:
    """Trace number ``index`` of the corpus; a pure function of (config, index)."""
    gen = _Gen(random.Random(config.trace_seed(index)), config)
    events = []
    if config.events:
        events.append(TraceEvent("li", rd=STACK_REG, imm=STACK_BASE))
        gen.machine.exec(events[0])
    while len(events) < config.events:
        events.append(gen.event())
    return TraceProgram(events, source=f"fuzz-{config.seed}-{index}")


# -- differential execution -------------------------------------------------


@dataclass
class TraceOutcome:
    verdicts: Counter
    discrepancies: list  # (what, step, kernel side, oracle side)
    rejected: bool
    caps_created: int
    caps_invalidated: int
    ops: int


def run_trace(
    program: TraceProgram,
    config: KernelConfig,
    *,
    mode: str = "compat",
    end_to_end: bool = True,
    kernel_factory: Optional[Callable] = None,
    audit_every: int = 1000,
) -> TraceOutcome:
    """Execute one trace with every audit enabled."""
    kernel = kernel_factory(config) if kernel_factory else Kernel(config)
    machine = Machine(kernel=kernel, mode=mode, on_violation="continue", audit_every=audit_every)
    found = []
    seen_ops = 0
    nodes = kernel.nodes
    for index, event in enumerate(program.events):
        if machine.halted:
            break
        try:
            machine.exec(event, index)
        except Exception as err:  # noqa: BLE001 - a crashing kernel is a finding
            found.append(("crash", index, repr(err), None))
            break
        if len(machine.ops) != seen_ops:
            seen_ops = len(machine.ops)
            bad = check_well_nested(nodes)
            if bad:
                found.append(("well-nested", index, bad, []))

    # kernel-operation stream against the oracle
    state = OracleState(config=config)
    revoked_once = Counter()
    replayed = []
    for op in machine.ops:
        state, verdict, result = oracle_step(state, op)
        replayed.append((verdict, result))
        if verdict != op.verdict:
            found.append(("verdict", op.step - 1, op.verdict, verdict))
            break
        if verdict == OK and op.op in ("drop", "store"):
            revoked_once.update(op.result)
        if verdict == OK and op.result != result:
            found.append(("result", op.step - 1, op.result, result))
            break
    else:
        mine = {i: n.perm for i, n in nodes.items()}
        if mine != state.perms():
            found.append(("perm-map", None, mine, state.perms()))

    twice = sorted(c for c, n in revoked_once.items() if n > 1)
    if twice:
        found.append(("work-bound", None, twice, []))
    if machine.invalidations > len(kernel):
        found.append(("work-bound", None, machine.invalidations, len(kernel)))

    # after a divergence the log names capabilities the oracle never created
    if len(replayed) == len(machine.ops) and not any(d[0] == "result" for d in found):
        pairs = check_exclusive_access(machine.access_log, machine.ops, config, replayed)
        if pairs:
            found.append(("exclusive-access", pairs[0][1] - 1, pairs, []))

    for at, bad in machine.audit_failures:
        found.append(("refcount", at - 1, bad, []))
    final = machine.audit_refcounts()
    if final:
        found.append(("refcount", None, final, []))

    verdicts = Counter(r.kind for r in machine.reports)
    verdicts.update(d.kind for d in machine.diagnostics)

    if end_to_end:
        theirs, _ = naive_run(program, config, mode=mode, on_violation="continue")
        reports = {r.event_index: (r.kind, r.cap) for r in machine.reports}
        for index, pair in enumerate(theirs):
            if pair is None:
                break
            mine = reports.get(index, (OK, None))
            if mine != pair:
                found.append(("end-to-end", index, mine, pair))
                break

    return TraceOutcome(
        verdicts=verdicts,
        discrepancies=found,
        rejected=bool(machine.reports),
        caps_created=len(kernel),
        caps_invalidated=machine.invalidations,
        ops=len(machine.ops),
    )


@dataclass
class FuzzReport:
    config: FuzzConfig
    discrepancies: list = field(default_factory=list)
    verdicts: Counter = field(default_factory=Counter)
    traces: int = 0
    events: int = 0
    rejected_traces: int = 0
    caps_created: int = 0
    caps_invalidated: int = 0

    @property
    def ok(self) -> bool:
        return not self.discrepancies

    def summary(self) -> dict:
        return {
            "seed": self.config.seed,
            "traces": self.traces,
            "events": self.events,
            "rejected_traces": self.rejected_traces,
            "caps_created": self.caps_created,
            "caps_invalidated": self.caps_invalidated,
            "verdicts": dict(sorted(self.verdicts.items())),
            "discrepancies": [d.to_dict() for d in self.discrepancies],
        }


def _fuzz_chunk(args):
    config, indices, kernel_factory, do_shrink = args
    rows = []
    for index in indices:
        program = generate(config, index)
        outcome = run_trace(
            program, config.kernel, mode=config.mode, end_to_end=config.end_to_end, kernel_factory=kernel_factory
        )
        disc = []
        for what, step, mine, theirs in outcome.discrepancies[:1]:
            d = Discrepancy(config.seed, index, what, step, mine, theirs, program)
            if do_shrink:
                d.shrunk = shrink(program, _still_fails(config, what, kernel_factory))
            disc.append(d)
        rows.append((index, outcome, disc))
    return rows


def _still_fails(config, what, kernel_factory):
    def predicate(program):
        outcome = run_trace(
            program, config.kernel, mode=config.mode, end_to_end=config.end_to_end, kernel_factory=kernel_factory
        )
        return any(d[0] == what for d in outcome.discrepancies)

    return predicate


def run_differential(
    config: FuzzConfig,
    *,
    kernel_factory: Optional[Callable] = None,
    jobs: int = 1,
    shrink_failures: bool = True,
    max_discrepancies: Optional[int] = None,
) -> FuzzReport:
    """Run ``config.traces`` generated traces through every audit.

    Results are aggregated in trace-index order whatever ``jobs`` is.
    """
    report = FuzzReport(config)
    indices = list(range(config.traces))
    if jobs > 1 and len(indices) > 1:
        import multiprocessing

        chunks = [indices[i::jobs] for i in range(jobs)]
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            parts = pool.map(_fuzz_chunk, [(config, c, kernel_factory, shrink_failures) for c in chunks])
        rows = sorted((r for part in parts for r in part), key=lambda r: r[0])
    else:
        rows = []
        for index in indices:
            rows.extend(_fuzz_chunk((config, [index], kernel_factory, shrink_failures)))
            if max_discrepancies is not None and sum(len(r[2]) for r in rows) >= max_discrepancies:
                break
    for index, outcome, disc in rows:
        report.traces += 1
        report.events += config.events
        report.verdicts.update(outcome.verdicts)
        report.rejected_traces += outcome.rejected
        report.caps_created += outcome.caps_created
        report.caps_invalidated += outcome.caps_invalidated
        report.discrepancies.extend(disc)
    return report


def write_reproducers(report: FuzzReport, directory) -> list:
    """One ``.cap`` per discrepancy (shrunk when available) plus ``summary.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in report.discrepancies:
        program = d.shrunk if d.shrunk is not None else d.trace
        path = directory / f"repro-{d.seed}-{d.index}-{d.what}.cap"
        header = (
            f"# seed {d.seed} trace {d.index}: {d.what} at event {d.step} of the original "
            f"{len(d.trace)}-event trace\n# kernel {d.kernel_verdict!r} vs oracle {d.oracle_verdict!r}\n"
        )
        path.write_text(header + serialize(program))
        paths.append(path)
    (directory / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return paths


# -- shrinking --------------------------------------------------------------


def _simplifications(ev: TraceEvent):
    if ev.op == "borrow":
        if ev.lo is not None:
            yield replace(ev, lo=None, hi=None)
        if ev.kind != "mut":
            yield replace(ev, kind="mut")
    if ev.op in ("ld", "sd"):
        if ev.width != 8:
            yield replace(ev, width=8)
        if ev.offset:
            yield replace(ev, offset=0)
    if ev.op in ("li", "addi") and ev.imm:
        yield replace(ev, imm=0)
    if ev.op == "alloc" and ev.kind:
        yield replace(ev, kind=None)
    if ev.op == "add":
        yield TraceEvent("mv", rd=ev.rd, rs1=ev.rs1)
    if ev.expect is not None:
        yield replace(ev, expect=None)


def shrink(program: TraceProgram, predicate: Callable[[TraceProgram], bool]) -> TraceProgram:
    """Greedy reduction by chunk deletion then operand simplification."""
    events = list(program.events)
    if not predicate(TraceProgram(events, program.source)):
        raise ValueError("shrink needs a trace that satisfies the predicate")

    def holds(candidate):
        return predicate(TraceProgram(candidate, program.source))

    changed = True
    while changed:
        changed = False
        size = max(len(events) // 2, 1)
        while size >= 1:
            start = 0
            while start < len(events):
                candidate = events[:start] + events[start + size:]
                if candidate != events and holds(candidate):
                    events = candidate
                    changed = True
                else:
                    start += size
            size //= 2
        for i in range(len(events)):
            for simpler in _simplifications(events[i]):
                candidate = events[:i] + [simpler] + events[i + 1:]
                if holds(candidate):
                    events = candidate
                    changed = True
                    break
    return TraceProgram(events, program.source)
