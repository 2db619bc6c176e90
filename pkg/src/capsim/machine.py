"""Register/memory machine that drives the kernel from trace events.

Values carry a provenance list of capability ids.  Eight-byte aligned
stores of width 8 copy the stored register's provenance into a shadow slot;
any other write overlapping a slot clears it.  Each capability occupies one
physical metadata slot, recycled once the capability is invalid and no
longer referenced from shadow memory or registers.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .kernel import (
    BorrowKind,
    CapTag,
    Kernel,
    KernelConfig,
    KernelError,
    Permission,
)
from .log import OK, AccessEvent, AccessLog, KernelOp
from .trace import MASK64, NUM_REGS, TraceEvent, TraceProgram

log = logging.getLogger(__name__)

SLOT = 8
DEFAULT_POOL_SIZE = 65536
DEFAULT_PROVENANCE_BOUND = 8
MODES = ("compat", "strict")
ON_VIOLATION = ("halt", "continue")


@dataclass(frozen=True)
class Register:
    value: int = 0
    provenance: tuple = ()


ZERO = Register()


@dataclass
class ViolationReport:
    event_index: int
    kind: str
    cap: Optional[int]
    parents: list
    addr: Optional[int]
    width: Optional[int]
    message: str
    line: int = 0
    tree: Optional[list] = None

    def to_dict(self) -> dict:
        out = {
            "event_index": self.event_index,
            "kind": self.kind,
            "cap": self.cap,
            "parents": list(self.parents),
            "addr": self.addr,
            "width": self.width,
            "message": self.message,
            "line": self.line,
        }
        if self.tree is not None:
            out["tree"] = self.tree
        return out


@dataclass(frozen=True)
class Diagnostic:
    event_index: int
    kind: str
    message: str


@dataclass
class StepResult:
    status: str  # "ok" | "halt" | "violation"
    report: Optional[ViolationReport] = None
    diagnostics: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return self.report.kind if self.report else OK


class _Violation(Exception):
    def __init__(self, kind, message, cap=None, addr=None, width=None):
        super().__init__(message)
        self.kind = kind
        self.cap = cap
        self.addr = addr
        self.width = width


class PoolExhausted(Exception):
    pass


class MetadataPool:
    """Fixed number of physical metadata slots with per-capability refcounts."""

    def __init__(self, size: int = DEFAULT_POOL_SIZE):
        if size <= 0:
            raise ValueError("pool size must be positive")
        self.size = size
        self.slot_of: dict[int, int] = {}
        self.free: list[int] = []
        self.refcount: Counter = Counter()
        self._unused = 0
        self.recycled = 0

    def has_free(self) -> bool:
        return bool(self.free) or self._unused < self.size

    def take(self) -> int:
        if self.free:
            return self.free.pop()
        if self._unused < self.size:
            self._unused += 1
            return self._unused - 1
        raise PoolExhausted("no free metadata slot")

    def give_back(self, slot: int) -> None:
        self.free.append(slot)

    def bind(self, cap: int, slot: int) -> None:
        self.slot_of[cap] = slot

    def release(self, cap: int) -> None:
        self.free.append(self.slot_of.pop(cap))
        self.recycled += 1

    def incref(self, ids) -> None:
        for i in ids:
            self.refcount[i] += 1

    def decref(self, ids) -> None:
        for i in ids:
            self.refcount[i] -= 1
            if not self.refcount[i]:
                del self.refcount[i]

    def __len__(self):
        return len(self.slot_of)


class ShadowMemory:
    """Byte-addressed data plus per-slot provenance lists."""

    def __init__(self, pool: MetadataPool):
        self.data: dict[int, int] = {}
        self.slots: dict[int, tuple] = {}
        self._pool = pool

    def read(self, addr: int, width: int) -> int:
        get = self.data.get
        return int.from_bytes(bytes(get((addr + k) & MASK64, 0) for k in range(width)), "little")

    def write(self, addr: int, width: int, value: int) -> None:
        for k, byte in enumerate(value.to_bytes(8, "little")[:width]):
            self.data[(addr + k) & MASK64] = byte

    def get_slot(self, addr: int) -> tuple:
        return self.slots.get(addr, ())

    def set_slot(self, addr: int, provenance: tuple) -> None:
        old = self.slots.pop(addr, ())
        self._pool.decref(old)
        if provenance:
            self.slots[addr] = provenance
            self._pool.incref(provenance)

    def clear(self, addr: int, width: int) -> None:
        first = addr - addr % SLOT
        for base in range(first, addr + width, SLOT):
            if base in self.slots:
                self.set_slot(base, ())


class Machine:
    """One execution of a trace against a fresh kernel."""

    def __init__(
        self,
        config: Optional[KernelConfig] = None,
        *,
        mode: str = "compat",
        on_violation: str = "halt",
        pool_size: int = DEFAULT_POOL_SIZE,
        provenance_bound: int = DEFAULT_PROVENANCE_BOUND,
        kernel: Optional[Kernel] = None,
        audit_every: int = 0,
        record: bool = True,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if on_violation not in ON_VIOLATION:
            raise ValueError(f"on_violation must be one of {ON_VIOLATION}")
        if provenance_bound < 1:
            raise ValueError("provenance bound must be at least 1")
        self.kernel = kernel if kernel is not None else Kernel(config)
        self.config = self.kernel.config
        self.mode = mode
        self.on_violation = on_violation
        self.provenance_bound = provenance_bound
        self.audit_every = audit_every
        # without recording, the op and access logs and report trees are skipped
        self.record = record
        self.regs = [ZERO] * NUM_REGS
        self.pool = MetadataPool(pool_size)
        self.memory = ShadowMemory(self.pool)
        self.step = 0
        self.halted = False
        self.ops: list[KernelOp] = []
        self.access_log = AccessLog()
        self.reports: list[ViolationReport] = []
        self.diagnostics: list[Diagnostic] = []
        self.audit_failures: list = []
        self.revoked_by: dict[int, tuple] = {}
        self.invalidations = 0
        self._index = 0

    # -- registers ----------------------------------------------------------

    def _set(self, rd: int, value: int, provenance: tuple = ()) -> None:
        if rd:
            self.regs[rd] = Register(value & MASK64, provenance)

    def _merge(self, a: tuple, b: tuple) -> tuple:
        merged = tuple(dict.fromkeys(a + b))
        if len(merged) > self.provenance_bound:
            dropped = merged[: len(merged) - self.provenance_bound]
            merged = merged[len(merged) - self.provenance_bound:]
            self._diagnose("provenance-truncated", f"dropped capabilities {list(dropped)} from a merged value")
        return merged

    def _diagnose(self, kind, message):
        diag = Diagnostic(self._index, kind, message)
        self.diagnostics.append(diag)
        self._step_diags.append(diag)
        log.debug("event %d: %s: %s", self._index, kind, message)

    # -- provenance ---------------------------------------------------------

    def resolve_provenance(self, reg: int, addr: int, width: int) -> Optional[int]:
        """Pick the capability a register uses for ``[addr, addr + width)``.

        Entries whose bounds contain the range are preferred; failing that,
        entries whose bounds intersect it (so the kernel reports the bounds
        violation).  Valid entries beat invalid ones and the newest wins.
        Returns ``None`` for a permitted untracked access.
        """
        provenance = self.regs[reg].provenance
        lo, hi = addr, addr + width
        nodes = self.kernel.nodes
        pool = [c for c in provenance if nodes[c].lo <= lo and hi <= nodes[c].hi]
        if not pool:
            pool = [c for c in provenance if nodes[c].lo < hi and lo < nodes[c].hi]
        if not pool:
            live = self.kernel.live_roots_overlapping(lo, hi)
            if self.mode == "strict" or live:
                why = "no capability" if not provenance else f"none of {list(provenance)} covers the range"
                where = f" (live allocation {live[0]})" if live else ""
                raise _Violation(
                    "untracked-access",
                    f"access to [{lo:#x}, {hi:#x}) through r{reg}: {why}{where}",
                    addr=addr,
                    width=width,
                )
            return None
        valid = [c for c in pool if nodes[c].perm is not Permission.NA]
        if len(valid) > 1:
            self._diagnose("provenance-ambiguous", f"r{reg} has valid capabilities {sorted(valid)}; using {max(valid)}")
        chosen = max(valid or pool)
        if reg:
            self.regs[reg] = Register(self.regs[reg].value, (chosen,))
        return chosen

    # -- metadata pool ------------------------------------------------------

    def reclaim_metadata(self) -> int:
        """Recycle slots of invalid capabilities referenced from nowhere."""
        in_regs = {c for r in self.regs for c in r.provenance}
        nodes = self.kernel.nodes
        eligible = [
            c
            for c in self.pool.slot_of
            if nodes[c].perm is Permission.NA and not self.pool.refcount.get(c) and c not in in_regs
        ]
        for c in eligible:
            self.pool.release(c)
        if eligible:
            log.debug("reclaimed %d metadata slots", len(eligible))
        return len(eligible)

    def _reserve_slot(self) -> int:
        if not self.pool.has_free() and not self.reclaim_metadata():
            raise _Violation("pool-exhausted", f"all {self.pool.size} metadata slots hold live capabilities")
        return self.pool.take()

    def audit_refcounts(self) -> list:
        """``(cap, recorded, actual)`` for every refcount that disagrees with a recount."""
        actual = Counter(c for prov in self.memory.slots.values() for c in prov)
        recorded = self.pool.refcount
        return sorted(
            (c, recorded.get(c, 0), actual.get(c, 0))
            for c in set(actual) | set(recorded)
            if recorded.get(c, 0) != actual.get(c, 0)
        )

    # -- kernel calls -------------------------------------------------------

    def _kernel(self, op: KernelOp, call):
        op.step = self.step
        if self.record:
            self.ops.append(op)
        try:
            result = call()
        except KernelError as err:
            op.verdict = err.kind
            raise _Violation(err.kind, str(err), cap=err.cap, addr=op.lo, width=None if op.lo is None else op.hi - op.lo)
        op.result = result
        return result

    def _note_revoked(self, revoked, how):
        for c in revoked:
            self.revoked_by[c] = (self._index, how)
        self.invalidations += len(revoked)

    def _new_cap(self, make, op: KernelOp) -> int:
        slot = self._reserve_slot()
        try:
            cap = self._kernel(op, make)
        except _Violation:
            self.pool.give_back(slot)
            raise
        self.pool.bind(cap, slot)
        return cap

    # -- execution ----------------------------------------------------------

    def exec(self, event: TraceEvent, index: Optional[int] = None) -> StepResult:
        if self.halted:
            raise RuntimeError("machine has halted")
        self._index = self.step if index is None else index
        self._step_diags = []
        self.step += 1
        base_reg = None
        try:
            op = event.op
            if op == "halt":
                self.halted = True
                return StepResult("halt", diagnostics=self._step_diags)
            regs = self.regs
            if op == "li":
                self._set(event.rd, event.imm)
            elif op == "mv":
                r = regs[event.rs1]
                self._set(event.rd, r.value, r.provenance)
            elif op == "add":
                a, b = regs[event.rs1], regs[event.rs2]
                self._set(event.rd, a.value + b.value, self._merge(a.provenance, b.provenance))
            elif op == "addi":
                a = regs[event.rs1]
                self._set(event.rd, a.value + event.imm, a.provenance)
            elif op == "alloc":
                self._alloc(event)
            elif op == "borrow":
                base_reg = event.rs1
                self._borrow(event)
            elif op == "drop":
                base_reg = event.rs1
                self._drop(event)
            elif op in ("ld", "sd"):
                base_reg = event.rs1
                self._access(event)
            else:
                raise ValueError(f"unknown opcode {op!r}")
        except _Violation as v:
            return self._violation(v, event, base_reg)
        finally:
            if self.audit_every and self.step % self.audit_every == 0:
                bad = self.audit_refcounts()
                if bad:
                    self.audit_failures.append((self.step, bad))
        return StepResult("ok", diagnostics=self._step_diags)

    def _alloc(self, ev):
        tag = CapTag(ev.kind or "ref")
        lo, hi = ev.addr, ev.addr + ev.length
        cap = self._new_cap(lambda: self.kernel.alloc(lo, hi, tag), KernelOp("alloc", lo=lo, hi=hi, kind=tag.value))
        self._set(ev.rd, ev.addr, (cap,))

    def _borrow(self, ev):
        src = self.regs[ev.rs1]
        if ev.lo is None:
            cap = self.resolve_provenance(ev.rs1, src.value, 1)
        else:
            cap = self.resolve_provenance(ev.rs1, ev.lo, ev.hi - ev.lo)
        if cap is None:
            self._set(ev.rd, src.value)
            return
        kind = BorrowKind(ev.kind)
        new = self._new_cap(
            lambda: self.kernel.borrow(cap, kind, ev.lo, ev.hi),
            KernelOp("borrow", cap=cap, lo=ev.lo, hi=ev.hi, kind=kind.value),
        )
        self._set(ev.rd, src.value, (new,))

    def _drop(self, ev):
        cap = self.resolve_provenance(ev.rs1, self.regs[ev.rs1].value, 1)
        if cap is None:
            return
        revoked = self._kernel(KernelOp("drop", cap=cap), lambda: self.kernel.drop_cap(cap))
        self._note_revoked(revoked, f"drop of capability {cap}")

    def _access(self, ev):
        store = ev.op == "sd"
        name = "store" if store else "load"
        width = ev.width
        addr = (self.regs[ev.rs1].value + ev.offset) & MASK64
        try:
            cap = self.resolve_provenance(ev.rs1, addr, width)
            if cap is not None:
                op = KernelOp(name, cap=cap, lo=addr, hi=addr + width)
                if store:
                    changed = self._kernel(op, lambda: self.kernel.access_store(cap, addr, width))
                    self._note_revoked(changed, f"store via capability {cap}")
                else:
                    changed = self._kernel(op, lambda: self.kernel.access_load(cap, addr, width))
                    for c in changed:
                        self.revoked_by[c] = (self._index, f"load via capability {cap}")
        except _Violation as v:
            if self.record:
                self.access_log.record(AccessEvent(self.step, name, v.cap or 0, addr, addr + width, v.kind))
            raise
        if self.record:
            self.access_log.record(AccessEvent(self.step, name, cap or 0, addr, addr + width))

        aligned = width == SLOT and addr % SLOT == 0
        if store:
            src = self.regs[ev.rs2]
            self.memory.write(addr, width, src.value)
            if aligned:
                self.memory.set_slot(addr, src.provenance)
            else:
                self.memory.clear(addr, width)
        else:
            value = self.memory.read(addr, width)
            self._set(ev.rd, value, self.memory.get_slot(addr) if aligned else ())

    def _violation(self, v: _Violation, event, base_reg) -> StepResult:
        parents = self.kernel.ancestors(v.cap) if v.cap else []
        message = str(v)
        if v.cap and v.cap in self.revoked_by:
            at, how = self.revoked_by[v.cap]
            message += f"; capability {v.cap} lost access at event {at} ({how})"
        elif parents and len(parents) > 1:
            for anc in parents:
                if anc in self.revoked_by:
                    at, how = self.revoked_by[anc]
                    message += f"; ancestor {anc} lost access at event {at} ({how})"
                    break
        tree = None
        if v.cap and self.record:
            tree = self._tree(parents[0])
        report = ViolationReport(
            event_index=self._index,
            kind=v.kind,
            cap=v.cap or None,
            parents=parents,
            addr=v.addr,
            width=v.width,
            message=message,
            line=event.line,
            tree=tree,
        )
        self.reports.append(report)
        if self.on_violation == "halt":
            self.halted = True
        elif base_reg:
            self.regs[base_reg] = Register(self.regs[base_reg].value, ())
        return StepResult("violation", report, self._step_diags)

    def _tree(self, root: int) -> list:
        nodes = self.kernel.nodes
        out = []
        members = {root}
        for i in range(root, len(self.kernel) + 1):
            n = nodes[i]
            if i == root or n.parent in members:
                members.add(i)
                out.append(
                    {"id": i, "lo": n.lo, "hi": n.hi, "perm": n.perm.value, "parent": n.parent or None, "tag": n.tag.value}
                )
        return out

    # -- whole programs -----------------------------------------------------

    def run(self, program: TraceProgram) -> "RunResult":
        verdicts: list = [None] * len(program)
        for index, event in enumerate(program.events):
            if self.halted:
                break
            verdicts[index] = self.exec(event, index).verdict
        return RunResult(self, verdicts)


@dataclass
class RunResult:
    machine: Machine
    verdicts: list  # per event: "ok", a violation kind, or None if not executed

    @property
    def reports(self) -> list:
        return self.machine.reports

    @property
    def caps_created(self) -> int:
        return len(self.machine.kernel)

    @property
    def caps_invalidated(self) -> int:
        return self.machine.invalidations


def run_program(program: TraceProgram, config: Optional[KernelConfig] = None, **kwargs) -> RunResult:
    return Machine(config, **kwargs).run(program)
