"""Revoke-on-use capability kernel.

A pure state machine over a forest of borrow trees.  Every capability has
closed-open byte bounds, a permission (RW, RO or NA) and an optional parent.
Memory accesses implicitly revoke (stores) or demote (loads) every
capability that overlaps the accessed range and is not an ancestor of the
capability used for the access.

Invalidated subtrees are disconnected from the forest so that only valid
capabilities are ever traversed again; the flat ``_caps`` table keeps every
capability ever created so :meth:`Kernel.snapshot` can report history.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterator, Mapping, Optional

NULL = 0
PAGE_SHIFT = 12
LARGE_PAGES = 64


class Permission(enum.Enum):
    RW = "RW"
    RO = "RO"
    NA = "NA"


class CapTag(enum.Enum):
    REF = "ref"
    RAW = "raw"
    CELL = "cell"


class BorrowKind(enum.Enum):
    MUT = "mut"
    IMM = "imm"
    RAW_MUT = "raw-mut"
    RAW_IMM = "raw-imm"
    CELL = "cell"

    @property
    def writable(self) -> bool:
        return self in (BorrowKind.MUT, BorrowKind.RAW_MUT, BorrowKind.CELL)

    @property
    def tag(self) -> CapTag:
        if self in (BorrowKind.RAW_MUT, BorrowKind.RAW_IMM):
            return CapTag.RAW
        if self is BorrowKind.CELL:
            return CapTag.CELL
        return CapTag.REF


@dataclass(frozen=True)
class Capability:
    lo: int
    hi: int
    perm: Permission
    parent: int = NULL
    tag: CapTag = CapTag.REF

    @property
    def valid(self) -> bool:
        return self.perm is not Permission.NA


@dataclass(frozen=True)
class KernelConfig:
    raw_pointer_relaxation: bool = True
    cell_relaxation: bool = True


class KernelError(Exception):
    """A failed rule precondition; ``kind`` names the violation."""

    kind = "kernel-error"

    def __init__(self, message: str, cap: int = NULL):
        super().__init__(message)
        self.cap = cap


class EmptyRange(KernelError, ValueError):
    kind = "empty-range"


class UnknownCapability(KernelError, KeyError):
    kind = "unknown-capability"


class BorrowFromInvalid(KernelError):
    kind = "borrow-from-invalid"


class BorrowMutFromRO(KernelError):
    kind = "borrow-mut-from-ro"


class BoundsNotSubset(KernelError):
    kind = "bounds-not-subset"


class DropInvalid(KernelError):
    kind = "drop-invalid"


class InvalidCapLoad(KernelError):
    kind = "invalid-capability-load"


class InvalidCapStore(KernelError):
    kind = "invalid-capability-store"


class PermissionStore(KernelError):
    kind = "permission-store"


class OutOfBoundsLoad(KernelError):
    kind = "out-of-bounds-load"


class OutOfBoundsStore(KernelError):
    kind = "out-of-bounds-store"


class _Node:
    __slots__ = ("id", "lo", "hi", "perm", "parent", "tag", "children")

    def __init__(self, id, lo, hi, perm, parent, tag):
        self.id = id
        self.lo = lo
        self.hi = hi
        self.perm = perm
        self.parent = parent
        self.tag = tag
        # connected children only; insertion-ordered
        self.children: dict[int, _Node] = {}

    def freeze(self) -> Capability:
        return Capability(self.lo, self.hi, self.perm, self.parent, self.tag)


class _RootIndex:
    """Page-bucketed index of the roots that are still connected."""

    def __init__(self):
        self._pages: dict[int, dict[int, _Node]] = {}
        self._large: dict[int, _Node] = {}

    @staticmethod
    def _span(lo, hi):
        return range(lo >> PAGE_SHIFT, ((hi - 1) >> PAGE_SHIFT) + 1)

    def add(self, node):
        span = self._span(node.lo, node.hi)
        if len(span) > LARGE_PAGES:
            self._large[node.id] = node
            return
        for page in span:
            self._pages.setdefault(page, {})[node.id] = node

    def remove(self, node):
        if self._large.pop(node.id, None) is not None:
            return
        for page in self._span(node.lo, node.hi):
            bucket = self._pages.get(page)
            if bucket is not None:
                bucket.pop(node.id, None)
                if not bucket:
                    del self._pages[page]

    def overlapping(self, lo, hi) -> list:
        found = {}
        span = self._span(lo, hi)
        if len(span) > len(self._pages):
            # wide query: walk the occupied pages instead
            for page, bucket in self._pages.items():
                if page in span:
                    found.update(bucket)
        else:
            for page in span:
                bucket = self._pages.get(page)
                if bucket:
                    found.update(bucket)
        found.update(self._large)
        return [n for n in found.values() if n.lo < hi and lo < n.hi]

    def all(self) -> list:
        found = dict(self._large)
        for bucket in self._pages.values():
            found.update(bucket)
        return list(found.values())


class Kernel:
    """Capability map plus the six instruction transitions.

    >>> k = Kernel()
    >>> root = k.alloc(0x1000, 0x1008)
    >>> ref = k.borrow(root, "mut")
    >>> sorted(k.access_store(root, 0x1000, 8))
    [2]
    """

    def __init__(self, config: Optional[KernelConfig] = None):
        self.config = config or KernelConfig()
        self._caps: dict[int, _Node] = {}
        self._roots = _RootIndex()
        self._next_id = 1

    # -- queries -----------------------------------------------------------

    @property
    def nodes(self) -> Mapping[int, _Node]:
        """Read-only live view; node objects expose ``perm`` and ``parent``."""
        return MappingProxyType(self._caps)

    def __contains__(self, cap: int) -> bool:
        return cap in self._caps

    def __len__(self) -> int:
        return len(self._caps)

    def get(self, cap: int) -> Capability:
        return self._node(cap).freeze()

    def perm(self, cap: int) -> Permission:
        return self._node(cap).perm

    def is_valid(self, cap: int) -> bool:
        node = self._caps.get(cap)
        return node is not None and node.perm is not Permission.NA

    def snapshot(self) -> dict[int, Capability]:
        return {i: n.freeze() for i, n in self._caps.items()}

    def ancestors(self, cap: int) -> list[int]:
        """Parent chain from the root down to ``cap`` (inclusive)."""
        chain = []
        node = self._node(cap)
        while True:
            chain.append(node.id)
            if node.parent == NULL:
                break
            node = self._caps[node.parent]
        chain.reverse()
        return chain

    def root_of(self, cap: int) -> int:
        return self.ancestors(cap)[0]

    def children(self, cap: int) -> list[int]:
        """Connected children; empty once ``cap`` has been invalidated."""
        return list(self._node(cap).children)

    def live_roots_overlapping(self, lo: int, hi: int) -> list[int]:
        return sorted(n.id for n in self._roots.overlapping(lo, hi))

    def connected(self) -> Iterator[int]:
        """Ids reachable from the live roots through child links."""
        stack = self._roots.all()
        while stack:
            node = stack.pop()
            yield node.id
            stack.extend(node.children.values())

    def _node(self, cap: int) -> _Node:
        try:
            return self._caps[cap]
        except KeyError:
            raise UnknownCapability(f"no capability {cap}", cap) from None

    # -- transitions -------------------------------------------------------

    def alloc(self, lo: int, hi: int, tag: CapTag = CapTag.REF) -> int:
        if lo >= hi:
            raise EmptyRange(f"empty allocation [{lo:#x}, {hi:#x})")
        node = self._create(lo, hi, Permission.RW, NULL, tag)
        self._roots.add(node)
        return node.id

    def borrow(self, src: int, kind, lo: Optional[int] = None, hi: Optional[int] = None) -> int:
        kind = BorrowKind(kind)
        parent = self._node(src)
        if parent.perm is Permission.NA:
            raise BorrowFromInvalid(f"borrow from invalid capability {src}", src)
        if kind.writable and parent.perm is not Permission.RW:
            raise BorrowMutFromRO(f"{kind.value} borrow from read-only capability {src}", src)
        lo = parent.lo if lo is None else lo
        hi = parent.hi if hi is None else hi
        if not parent.lo <= lo < hi <= parent.hi:
            raise BoundsNotSubset(
                f"[{lo:#x}, {hi:#x}) not within [{parent.lo:#x}, {parent.hi:#x}) of capability {src}", src
            )
        perm = Permission.RW if kind.writable else Permission.RO
        node = self._create(lo, hi, perm, src, kind.tag)
        parent.children[node.id] = node
        return node.id

    def drop_cap(self, cap: int) -> frozenset:
        node = self._node(cap)
        if node.perm is Permission.NA:
            raise DropInvalid(f"drop of invalid capability {cap}", cap)
        while node.parent != NULL:
            node = self._caps[node.parent]
        return frozenset(self._revoke([node]))

    def access_store(self, cap: int, addr: int, width: int) -> frozenset:
        node = self._node(cap)
        _check_width(width)
        if node.perm is Permission.NA:
            raise InvalidCapStore(f"store through invalid capability {cap}", cap)
        if not (node.lo <= addr and addr + width <= node.hi):
            raise OutOfBoundsStore(_oob_message("store", node, addr, width), cap)
        if node.perm is not Permission.RW:
            raise PermissionStore(f"store through read-only capability {cap}", cap)
        return frozenset(self._revoke(self._conflicts(node, addr, addr + width)))

    def access_load(self, cap: int, addr: int, width: int) -> frozenset:
        node = self._node(cap)
        _check_width(width)
        if node.perm is Permission.NA:
            raise InvalidCapLoad(f"load through invalid capability {cap}", cap)
        if not (node.lo <= addr and addr + width <= node.hi):
            raise OutOfBoundsLoad(_oob_message("load", node, addr, width), cap)
        return frozenset(self._demote(self._conflicts(node, addr, addr + width)))

    # -- internals ---------------------------------------------------------

    def _create(self, lo, hi, perm, parent, tag) -> _Node:
        node = _Node(self._next_id, lo, hi, perm, parent, tag)
        self._caps[node.id] = node
        self._next_id += 1
        return node

    def _conflicts(self, accessor: _Node, lo: int, hi: int) -> list:
        """Maximal non-exempt overlapping non-ancestors of ``accessor``.

        Children of a capability lie within its bounds, so a subtree that
        misses the range is skipped whole.  A returned node stands for its
        entire subtree.
        """
        ancestors = set()
        anchor = NULL
        node = accessor
        while True:
            ancestors.add(node.id)
            if anchor == NULL and node.tag is CapTag.CELL and self.config.cell_relaxation:
                anchor = node.id
            if node.parent == NULL:
                break
            node = self._caps[node.parent]
        raw_relax = self.config.raw_pointer_relaxation

        found = []
        stack = [(root, False) for root in self._roots.overlapping(lo, hi)]
        while stack:
            node, in_cell = stack.pop()
            if not (node.lo < hi and lo < node.hi):
                continue
            in_cell = in_cell or node.id == anchor
            if node.id not in ancestors:
                if anchor != NULL and not in_cell:
                    continue  # whole subtree lies outside the cell subtree
                if not (raw_relax and node.tag is CapTag.RAW and node.parent in ancestors):
                    found.append(node)
                    continue
            stack.extend((child, in_cell) for child in node.children.values())
        return found

    def _revoke(self, tops) -> list:
        revoked = []
        for top in tops:
            if top.parent == NULL:
                self._roots.remove(top)
            else:
                del self._caps[top.parent].children[top.id]
            stack = [top]
            while stack:
                node = stack.pop()
                node.perm = Permission.NA
                revoked.append(node.id)
                stack.extend(node.children.values())
                node.children = {}
        return revoked

    def _demote(self, tops) -> list:
        demoted = []
        stack = [t for t in tops if t.perm is Permission.RW]
        while stack:
            node = stack.pop()
            if node.perm is Permission.RW:
                node.perm = Permission.RO
                demoted.append(node.id)
                stack.extend(node.children.values())
        return demoted


def _check_width(width):
    if width <= 0:
        raise ValueError(f"access width must be positive, got {width}")


def _oob_message(op, node, addr, width):
    return (
        f"{op} of [{addr:#x}, {addr + width:#x}) outside "
        f"[{node.lo:#x}, {node.hi:#x}) of capability {node.id}"
    )
