"""Records emitted by the machine and consumed by the oracle and checkers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

OK = "ok"


@dataclass
class KernelOp:
    """One kernel transition as issued by the machine.

    ``op`` is one of alloc, borrow, drop, load, store.  Accesses use
    ``lo``/``hi`` for the closed-open byte range; borrows leave them ``None``
    to request the source's full bounds.  ``kind`` is the borrow kind or the
    allocation tag.  ``result`` holds the new id for alloc/borrow and the
    revoked or demoted ids for drop/store/load.
    """

    op: str
    cap: int = 0
    lo: Optional[int] = None
    hi: Optional[int] = None
    kind: Optional[str] = None
    step: int = 0
    verdict: str = OK
    result: object = None

    @property
    def width(self) -> int:
        return self.hi - self.lo


@dataclass(frozen=True)
class AccessEvent:
    step: int
    op: str  # "load" | "store"
    cap: int  # 0 for an untracked access
    lo: int
    hi: int
    verdict: str = OK


@dataclass
class AccessLog:
    events: list = field(default_factory=list)

    def record(self, event: AccessEvent) -> None:
        if self.events and event.step <= self.events[-1].step:
            raise ValueError("access log steps must strictly increase")
        self.events.append(event)

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)
