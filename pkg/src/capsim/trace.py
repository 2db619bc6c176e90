"""The ``.cap`` trace format.

One event per line::

    # comment
    expect ok
    alloc r1, 0x1000, 8
    borrow r2, r1, mut
    expect violation invalid-capability-store
    sd r0, 0(r2), 8
    halt

An ``expect`` directive attaches to the next event.  Numbers are decimal or
``0x`` hex.  :func:`serialize` emits the canonical form: single spaces,
lowercase hex for addresses and ``li`` immediates, decimal elsewhere,
comments dropped.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .kernel import BorrowKind
from .log import OK

VIOLATION_KINDS = (
    "invalid-capability-load",
    "invalid-capability-store",
    "permission-store",
    "out-of-bounds-load",
    "out-of-bounds-store",
    "borrow-from-invalid",
    "borrow-mut-from-ro",
    "bounds-not-subset",
    "drop-invalid",
    "untracked-access",
    "provenance-ambiguous",
    "pool-exhausted",
)

WIDTHS = (1, 2, 4, 8)
ALLOC_KINDS = ("ref", "raw", "cell")
BORROW_KINDS = tuple(k.value for k in BorrowKind)
MASK64 = (1 << 64) - 1
NUM_REGS = 32

# opcode -> operand shapes
_SHAPES = {
    "li": ("reg", "imm"),
    "mv": ("reg", "reg"),
    "add": ("reg", "reg", "reg"),
    "addi": ("reg", "reg", "imm"),
    "alloc": ("reg", "addr", "len"),
    "borrow": ("reg", "reg", "bkind"),
    "drop": ("reg",),
    "ld": ("reg", "mem", "width"),
    "sd": ("reg", "mem", "width"),
    "halt": (),
}

_NUM = re.compile(r"-?(0[xX][0-9a-fA-F]+|[0-9]+)\Z")
_MEM = re.compile(r"(-?(?:0[xX][0-9a-fA-F]+|[0-9]+))\((r[0-9]+)\)\Z")


class TraceSyntaxError(ValueError):
    """``kind`` is one of syntax-error, unknown-opcode, operand-arity, operand-range."""

    def __init__(self, kind: str, line: int, column: int, message: str):
        super().__init__(f"{line}:{column}: {kind}: {message}")
        self.kind = kind
        self.line = line
        self.column = column
        self.message = message


@dataclass(frozen=True)
class TraceEvent:
    op: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    addr: int = 0
    length: int = 0
    kind: Optional[str] = None
    lo: Optional[int] = None
    hi: Optional[int] = None
    offset: int = 0
    width: int = 0
    expect: Optional[str] = None
    line: int = field(default=0, compare=False)

    @property
    def is_access(self) -> bool:
        return self.op in ("ld", "sd")


@dataclass
class TraceProgram:
    events: list = field(default_factory=list)
    source: str = "<trace>"

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]

    def line_of(self, index: int) -> int:
        return self.events[index].line

    def __eq__(self, other):
        return isinstance(other, TraceProgram) and self.events == other.events


# -- parsing ----------------------------------------------------------------


def _number(text, line, col):
    if not _NUM.match(text):
        raise TraceSyntaxError("syntax-error", line, col, f"expected a number, got {text!r}")
    return int(text, 0)


def _register(text, line, col):
    if not re.fullmatch(r"r[0-9]+", text):
        raise TraceSyntaxError("syntax-error", line, col, f"expected a register, got {text!r}")
    n = int(text[1:])
    if n >= NUM_REGS:
        raise TraceSyntaxError("operand-range", line, col, f"no register {text}")
    return n


def _split_operands(rest, start_col):
    """Comma-separated operands with their 1-based columns."""
    out = []
    pos = 0
    for piece in rest.split(","):
        lead = len(piece) - len(piece.lstrip())
        out.append((piece.strip(), start_col + pos + lead))
        pos += len(piece) + 1
    return out


def _parse_event(body, line, col0):
    m = re.match(r"\s*(\S+)", body)
    op = m.group(1)
    opcol = col0 + m.start(1)
    if op not in _SHAPES:
        raise TraceSyntaxError("unknown-opcode", line, opcol, f"unknown opcode {op!r}")
    rest = body[m.end(1):]
    operands = _split_operands(rest, col0 + m.end(1)) if rest.strip() else []
    if any(not text for text, _ in operands):
        col = next(c for t, c in operands if not t)
        raise TraceSyntaxError("syntax-error", line, col, "empty operand")

    shape = _SHAPES[op]
    optional = {"alloc": 1, "borrow": 2}.get(op, 0)
    if not len(shape) <= len(operands) <= len(shape) + optional:
        want = f"{len(shape)}" if not optional else f"{len(shape)}-{len(shape) + optional}"
        raise TraceSyntaxError(
            "operand-arity", line, opcol, f"{op} takes {want} operands, got {len(operands)}"
        )

    def num(i, lo=-(1 << 63), hi=MASK64):
        text, col = operands[i]
        value = _number(text, line, col)
        if not lo <= value <= hi:
            raise TraceSyntaxError("operand-range", line, col, f"{text} out of range")
        return value

    def reg(i):
        text, col = operands[i]
        return _register(text, line, col)

    def mem(i):
        text, col = operands[i]
        mm = _MEM.match(text.replace(" ", ""))
        if not mm:
            raise TraceSyntaxError("syntax-error", line, col, f"expected off(reg), got {text!r}")
        off = _number(mm.group(1), line, col)
        if not -(1 << 63) <= off < (1 << 63):
            raise TraceSyntaxError("operand-range", line, col, f"offset {mm.group(1)} out of range")
        return off, _register(mm.group(2), line, col)

    def width(i):
        text, col = operands[i]
        w = _number(text, line, col)
        if w not in WIDTHS:
            raise TraceSyntaxError("operand-range", line, col, f"width must be one of {WIDTHS}")
        return w

    if op == "li":
        return TraceEvent(op, rd=reg(0), imm=num(1) & MASK64)
    if op == "mv":
        return TraceEvent(op, rd=reg(0), rs1=reg(1))
    if op == "add":
        return TraceEvent(op, rd=reg(0), rs1=reg(1), rs2=reg(2))
    if op == "addi":
        return TraceEvent(op, rd=reg(0), rs1=reg(1), imm=num(2))
    if op == "alloc":
        addr = num(1, 0)
        length = num(2, 1)
        if addr + length > MASK64 + 1:
            raise TraceSyntaxError("operand-range", line, operands[2][1], "allocation wraps the address space")
        kind = None
        if len(operands) == 4:
            text, col = operands[3]
            mk = re.fullmatch(r"kind=(\S+)", text)
            if not mk:
                raise TraceSyntaxError("syntax-error", line, col, f"expected kind=..., got {text!r}")
            if mk.group(1) not in ALLOC_KINDS:
                raise TraceSyntaxError("operand-range", line, col, f"unknown allocation kind {mk.group(1)!r}")
            kind = mk.group(1)
        return TraceEvent(op, rd=reg(0), addr=addr, length=length, kind=kind)
    if op == "borrow":
        text, col = operands[2]
        if text not in BORROW_KINDS:
            raise TraceSyntaxError("operand-range", line, col, f"unknown borrow kind {text!r}")
        if len(operands) == 4:
            raise TraceSyntaxError("operand-arity", line, opcol, "borrow bounds need both lo and hi")
        lo = hi = None
        if len(operands) == 5:
            lo, hi = num(3, 0), num(4, 0, MASK64 + 1)
            if lo >= hi:
                raise TraceSyntaxError("operand-range", line, operands[4][1], "borrow bounds must satisfy lo < hi")
        return TraceEvent(op, rd=reg(0), rs1=reg(1), kind=text, lo=lo, hi=hi)
    if op == "drop":
        return TraceEvent(op, rs1=reg(0))
    if op == "ld":
        off, base = mem(1)
        return TraceEvent(op, rd=reg(0), rs1=base, offset=off, width=width(2))
    if op == "sd":
        off, base = mem(1)
        return TraceEvent(op, rs2=reg(0), rs1=base, offset=off, width=width(2))
    return TraceEvent(op)


def _parse_expect(body, line, col0):
    words = body.split()
    if words[1:] == ["ok"]:
        return OK
    if len(words) == 3 and words[1] == "violation":
        if words[2] not in VIOLATION_KINDS:
            raise TraceSyntaxError("operand-range", line, col0 + body.index(words[2]), f"unknown violation kind {words[2]!r}")
        return words[2]
    raise TraceSyntaxError("syntax-error", line, col0, "expected 'expect ok' or 'expect violation <kind>'")


def parse(text: Union[str, bytes], source: str = "<trace>") -> TraceProgram:
    """Parse trace text; raises :class:`TraceSyntaxError` at the first error."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            line = bytes(text)[: exc.start].count(b"\n") + 1
            raise TraceSyntaxError("syntax-error", line, 1, "input is not valid UTF-8") from None
    events = []
    pending = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        col0 = 1
        if not body.isascii() or any(ch in body for ch in "\x00\x0b\x0c"):
            bad = next(i for i, ch in enumerate(body) if not ch.isascii() or ch in "\x00\x0b\x0c")
            raise TraceSyntaxError("syntax-error", lineno, bad + 1, "unexpected character")
        if body.split()[0] == "expect":
            if pending is not None:
                raise TraceSyntaxError("syntax-error", lineno, 1, "two expect directives for one event")
            pending = (_parse_expect(body, lineno, col0), lineno)
            continue
        event = _parse_event(body, lineno, col0)
        if pending is not None:
            event = replace(event, expect=pending[0])
            pending = None
        events.append(replace(event, line=lineno))
    if pending is not None:
        raise TraceSyntaxError("syntax-error", pending[1], 1, "expect directive without a following event")
    return TraceProgram(events, source)


# -- serialization ----------------------------------------------------------


def _hex(n):
    return f"-{-n:#x}" if n < 0 else f"{n:#x}"


def format_event(ev: TraceEvent) -> str:
    op = ev.op
    if op == "li":
        return f"li r{ev.rd}, {_hex(ev.imm)}"
    if op == "mv":
        return f"mv r{ev.rd}, r{ev.rs1}"
    if op == "add":
        return f"add r{ev.rd}, r{ev.rs1}, r{ev.rs2}"
    if op == "addi":
        return f"addi r{ev.rd}, r{ev.rs1}, {ev.imm}"
    if op == "alloc":
        tail = f", kind={ev.kind}" if ev.kind else ""
        return f"alloc r{ev.rd}, {_hex(ev.addr)}, {ev.length}{tail}"
    if op == "borrow":
        tail = f", {_hex(ev.lo)}, {_hex(ev.hi)}" if ev.lo is not None else ""
        return f"borrow r{ev.rd}, r{ev.rs1}, {ev.kind}{tail}"
    if op == "drop":
        return f"drop r{ev.rs1}"
    if op == "ld":
        return f"ld r{ev.rd}, {ev.offset}(r{ev.rs1}), {ev.width}"
    if op == "sd":
        return f"sd r{ev.rs2}, {ev.offset}(r{ev.rs1}), {ev.width}"
    return "halt"


def format_expect(expect: str) -> str:
    return "expect ok" if expect == OK else f"expect violation {expect}"


def serialize(program: TraceProgram) -> str:
    lines = []
    for ev in program.events:
        if ev.expect is not None:
            lines.append(format_expect(ev.expect))
        lines.append(format_event(ev))
    return "\n".join(lines) + "\n" if lines else ""


def load(path) -> TraceProgram:
    with open(path, "rb") as fh:
        return parse(fh.read(), source=str(path))
