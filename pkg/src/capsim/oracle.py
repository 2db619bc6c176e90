"""Naive reference semantics and invariant checkers.

Everything here is recomputed from the flat capability map at every step:
child sets come from a full scan, nothing is disconnected, nothing pruned.  It is slow on purpose and
serves as ground truth for :mod:`capsim.kernel`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

from .kernel import NULL, BorrowKind, Capability, CapTag, KernelConfig, Permission
from .log import OK, AccessLog, KernelOp

RW, RO, NA = Permission.RW, Permission.RO, Permission.NA


class MalformedEvent(ValueError):
    pass


@dataclass(frozen=True)
class OracleState:
    caps: Mapping[int, Capability] = field(default_factory=dict)
    config: KernelConfig = KernelConfig()
    next_id: int = 1

    def perms(self) -> dict[int, Permission]:
        return {i: c.perm for i, c in self.caps.items()}


# -- auxiliary definitions --------------------------------------------------


def children(m, i):
    return {j for j, c in m.items() if c.parent == i}


def child_index(m):
    """All child sets at once; one full scan of ``m``."""
    kids = {i: set() for i in m}
    for j, c in m.items():
        if c.parent != NULL:
            kids[c.parent].add(j)
    return kids


def derived(m, i, kids=None):
    kids = child_index(m) if kids is None else kids
    out = {i}
    for j in kids[i]:
        out |= derived(m, j, kids)
    return out


def derived_set(m, ids, kids=None):
    kids = child_index(m) if kids is None else kids
    out = set()
    for i in ids:
        out |= derived(m, i, kids)
    return out


def overlapping(m, lo, hi):
    return {i for i, c in m.items() if c.lo < hi and lo < c.hi}


def ancestors(m, i):
    c = m[i]
    if c.parent == NULL:
        return {i}
    return {i} | ancestors(m, c.parent)


def root(m, i):
    c = m[i]
    return i if c.parent == NULL else root(m, c.parent)


def revoke(m, ids):
    return {i: replace(c, perm=NA) if i in ids else c for i, c in m.items()}


def revoke_r(m, ids):
    return {i: replace(c, perm=RO) if i in ids and c.perm is RW else c for i, c in m.items()}


def conflict_set(m, i, lo, hi, config):
    """Overlapping non-ancestors of ``i`` minus the enabled exemptions."""
    kids = child_index(m)
    mine = ancestors(m, i)
    cells = []
    if config.cell_relaxation:
        cells = [d for u, c in m.items() if c.tag is CapTag.CELL for d in [derived(m, u, kids)] if i in d]
    out = set()
    for j in overlapping(m, lo, hi) - mine:
        c = m[j]
        if (
            config.raw_pointer_relaxation
            and c.tag is CapTag.RAW
            and c.parent != NULL
            and i in derived(m, c.parent, kids)
        ):
            continue
        if any(j not in d for d in cells):
            continue
        out.add(j)
    return out


# -- transitions ------------------------------------------------------------


def oracle_step(state: OracleState, event: KernelOp):
    """Apply one kernel operation; returns ``(state, verdict, result)``.

    A failed precondition leaves the state unchanged and yields the
    violation kind as verdict.
    """
    m = state.caps
    op = event.op
    if op == "alloc":
        if event.lo is None or event.hi is None:
            raise MalformedEvent("alloc needs bounds")
        if not event.lo < event.hi:
            return state, "empty-range", None
        tag = CapTag(event.kind or "ref")
        i = state.next_id
        new = dict(m)
        new[i] = Capability(event.lo, event.hi, RW, NULL, tag)
        return OracleState(new, state.config, i + 1), OK, i

    if op not in ("borrow", "drop", "load", "store"):
        raise MalformedEvent(f"unknown kernel operation {op!r}")
    if op in ("load", "store") and (event.lo is None or event.hi is None or event.hi <= event.lo):
        raise MalformedEvent(f"{op} needs a non-empty range")
    if event.cap not in m:
        return state, "unknown-capability", None
    src = m[event.cap]

    if op == "borrow":
        kind = BorrowKind(event.kind)
        if src.perm is NA:
            return state, "borrow-from-invalid", None
        if kind.writable and src.perm is not RW:
            return state, "borrow-mut-from-ro", None
        lo = src.lo if event.lo is None else event.lo
        hi = src.hi if event.hi is None else event.hi
        if not (src.lo <= lo and lo < hi and hi <= src.hi):
            return state, "bounds-not-subset", None
        i = state.next_id
        new = dict(m)
        new[i] = Capability(lo, hi, RW if kind.writable else RO, event.cap, kind.tag)
        return OracleState(new, state.config, i + 1), OK, i

    if op == "drop":
        if src.perm is NA:
            return state, "drop-invalid", None
        r = root(m, event.cap)
        doomed = derived(m, r) | {r}
        return _commit(state, revoke(m, doomed))

    lo, hi = event.lo, event.hi
    if src.perm is NA:
        return state, f"invalid-capability-{op}", None
    if not (src.lo <= lo and hi <= src.hi):
        return state, f"out-of-bounds-{op}", None
    if op == "store":
        if src.perm is not RW:
            return state, "permission-store", None
        s = conflict_set(m, event.cap, lo, hi, state.config)
        return _commit(state, revoke(m, derived_set(m, s)))
    s = conflict_set(m, event.cap, lo, hi, state.config)
    return _commit(state, revoke_r(m, derived_set(m, s)))


def _commit(state, new):
    changed = frozenset(i for i, c in new.items() if c.perm is not state.caps[i].perm)
    return OracleState(new, state.config, state.next_id), OK, changed


def replay(ops: Iterable[KernelOp], config: Optional[KernelConfig] = None):
    """Run a kernel-operation stream; returns ``(final_state, [(verdict, result)])``."""
    state = OracleState(config=config or KernelConfig())
    out = []
    for op in ops:
        state, verdict, result = oracle_step(state, op)
        out.append((verdict, result))
    return state, out


# -- invariant checkers -----------------------------------------------------


def check_well_nested(state) -> list[int]:
    """Valid capabilities whose parent is invalid.

    Accepts an :class:`OracleState` or any mapping of id to objects with
    ``perm`` and ``parent`` attributes (such as :attr:`Kernel.nodes`).
    """
    m = state.caps if isinstance(state, OracleState) else state
    bad = []
    for i, c in m.items():
        if c.perm is not NA and c.parent != NULL and m[c.parent].perm is NA:
            bad.append(i)
    return sorted(bad)


@dataclass
class _CapHistory:
    parent: dict = field(default_factory=dict)
    tag: dict = field(default_factory=dict)
    created: dict = field(default_factory=dict)
    invalidated: dict = field(default_factory=dict)

    def chain(self, i):
        out = set()
        while i != NULL:
            if i not in self.parent:
                raise ValueError(f"access log names capability {i}, which the history never created")
            out.add(i)
            i = self.parent[i]
        return out


def _history(ops, config, replayed=None):
    hist = _CapHistory()
    if replayed is None:
        replayed = replay(ops, config)[1]
    for op, (verdict, result) in zip(ops, replayed):
        if verdict != OK:
            continue
        if op.op == "alloc":
            hist.parent[result] = NULL
            hist.tag[result] = CapTag(op.kind or "ref")
            hist.created[result] = op.step
        elif op.op == "borrow":
            hist.parent[result] = op.cap
            hist.tag[result] = BorrowKind(op.kind).tag
            hist.created[result] = op.step
        elif op.op in ("drop", "store"):
            for i in result:
                hist.invalidated[i] = op.step
    return hist


def _exempt(hist, c, accessor_chain, config):
    if config.raw_pointer_relaxation and hist.tag[c] is CapTag.RAW and hist.parent[c] in accessor_chain:
        return True
    if config.cell_relaxation:
        c_chain = hist.chain(c)
        for u in accessor_chain:
            if hist.tag[u] is CapTag.CELL and u not in c_chain:
                return True
    return False


def check_exclusive_access(
    log: AccessLog,
    history: Iterable[KernelOp],
    config: Optional[KernelConfig] = None,
    replayed: Optional[list] = None,
):
    """Pairs ``(t1, t2)`` of successful accesses that break exclusive access.

    For some capability ``c`` created before ``t1`` and still valid at ``t2``:
    ``t1`` aliases ``t2``'s range and comes from outside ``c``'s subtree,
    ``t2`` goes through ``c``'s subtree, and either ``t1`` is a store or
    ``t2`` is a store.  ``history`` is the kernel-operation stream of the same
    run; it is replayed to recover parents, tags and validity windows
    (pass ``replayed``, the ``(verdict, result)`` list from :func:`replay`,
    to skip that).  Accesses from outside that an enabled relaxation permits
    are not reported.
    """
    config = config or KernelConfig()
    history = list(history)
    hist = _history(history, config, replayed)
    accesses = [e for e in log if e.verdict == OK]
    chains = [hist.chain(e.cap) if e.cap else frozenset() for e in accesses]
    pairs = []
    for b, second in enumerate(accesses):
        if not second.cap:
            continue
        t2 = second.step
        candidates = [
            c for c in chains[b] if hist.invalidated.get(c, t2) >= t2
        ]
        for a in range(b):
            first = accesses[a]
            if first.op != "store" and second.op != "store":
                continue
            if not (first.lo < second.hi and second.lo < first.hi):
                continue
            t1 = first.step
            for c in candidates:
                if hist.created[c] < t1 and c not in chains[a] and not _exempt(hist, c, chains[a], config):
                    pairs.append((t1, t2))
                    break
    return pairs


# -- end-to-end naive machine -----------------------------------------------


def naive_run(program, config: Optional[KernelConfig] = None, mode="compat", on_violation="continue", provenance_bound=8):
    """Execute a whole trace on :class:`OracleState` with dict-based machine state.

    Shares no code with :mod:`capsim.machine`.  Returns one ``(verdict, cap)``
    pair per event, ``None`` for events after a halt.  Metadata recycling is
    not modelled (it never changes verdicts with an unbounded pool).
    """
    mask = (1 << 64) - 1
    state = OracleState(config=config or KernelConfig())
    regs = {}  # reg -> (value, [caps])
    mem = {}
    shadow = {}
    out = [None] * len(program.events)

    def rd(n):
        return regs.get(n, (0, []))

    def wr(n, value, prov):
        if n != 0:
            regs[n] = (value & mask, list(prov))

    def live_root_overlaps(lo, hi):
        return any(
            c.parent == NULL and c.perm is not NA and c.lo < hi and lo < c.hi for c in state.caps.values()
        )

    def pick(n, lo, hi):
        prov = rd(n)[1]
        m = state.caps
        hits = [c for c in prov if m[c].lo <= lo and hi <= m[c].hi]
        if not hits:
            hits = [c for c in prov if m[c].lo < hi and lo < m[c].hi]
        if not hits:
            if mode == "strict" or live_root_overlaps(lo, hi):
                raise _Stuck("untracked-access", 0)
            return None
        good = [c for c in hits if m[c].perm is not NA]
        chosen = max(good) if good else max(hits)
        wr(n, rd(n)[0], [chosen])
        return chosen

    def kernel(op):
        nonlocal state
        state, verdict, result = oracle_step(state, op)
        if verdict != OK:
            raise _Stuck(verdict, op.cap)
        return result

    for index, ev in enumerate(program.events):
        base = None
        try:
            if ev.op == "halt":
                out[index] = (OK, None)
                break
            if ev.op == "li":
                wr(ev.rd, ev.imm, [])
            elif ev.op == "mv":
                wr(ev.rd, *rd(ev.rs1))
            elif ev.op == "add":
                (a, pa), (b, pb) = rd(ev.rs1), rd(ev.rs2)
                merged = []
                for c in pa + pb:
                    if c not in merged:
                        merged.append(c)
                wr(ev.rd, a + b, merged[-provenance_bound:])
            elif ev.op == "addi":
                a, pa = rd(ev.rs1)
                wr(ev.rd, a + ev.imm, pa)
            elif ev.op == "alloc":
                new = kernel(KernelOp("alloc", lo=ev.addr, hi=ev.addr + ev.length, kind=ev.kind or "ref"))
                wr(ev.rd, ev.addr, [new])
            elif ev.op == "borrow":
                base = ev.rs1
                value = rd(ev.rs1)[0]
                if ev.lo is None:
                    cap = pick(ev.rs1, value, value + 1)
                else:
                    cap = pick(ev.rs1, ev.lo, ev.hi)
                if cap is None:
                    wr(ev.rd, value, [])
                else:
                    new = kernel(KernelOp("borrow", cap=cap, lo=ev.lo, hi=ev.hi, kind=ev.kind))
                    wr(ev.rd, value, [new])
            elif ev.op == "drop":
                base = ev.rs1
                value = rd(ev.rs1)[0]
                cap = pick(ev.rs1, value, value + 1)
                if cap is not None:
                    kernel(KernelOp("drop", cap=cap))
            else:
                base = ev.rs1
                addr = (rd(ev.rs1)[0] + ev.offset) & mask
                lo, hi = addr, addr + ev.width
                cap = pick(ev.rs1, lo, hi)
                if cap is not None:
                    kernel(KernelOp("store" if ev.op == "sd" else "load", cap=cap, lo=lo, hi=hi))
                whole = ev.width == 8 and addr % 8 == 0
                if ev.op == "sd":
                    value, prov = rd(ev.rs2)
                    for k in range(ev.width):
                        mem[(addr + k) & mask] = (value >> (8 * k)) & 0xFF
                    for slot in list(shadow):
                        if slot < hi and lo < slot + 8:
                            del shadow[slot]
                    if whole and prov:
                        shadow[addr] = list(prov)
                else:
                    value = sum(mem.get((addr + k) & mask, 0) << (8 * k) for k in range(ev.width))
                    wr(ev.rd, value, shadow.get(addr, []) if whole else [])
            out[index] = (OK, None)
        except _Stuck as stuck:
            out[index] = (stuck.kind, stuck.cap or None)
            if on_violation == "halt":
                break
            if base:
                wr(base, rd(base)[0], [])
    return out, state


class _Stuck(Exception):
    def __init__(self, kind, cap):
        super().__init__(kind)
        self.kind = kind
        self.cap = cap
