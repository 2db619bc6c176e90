"""Revoke-on-use capability simulator.

:mod:`capsim.kernel` holds the borrow-forest semantics, :mod:`capsim.oracle`
a naive reference for them, :mod:`capsim.machine` the register machine that
drives the kernel from ``.cap`` traces (:mod:`capsim.trace`), and
:mod:`capsim.fuzz` the differential fuzzer.
"""
from .kernel import (
    BorrowKind,
    Capability,
    CapTag,
    Kernel,
    KernelConfig,
    KernelError,
    Permission,
)
from .machine import Machine, RunResult, ViolationReport, run_program
from .oracle import OracleState, check_exclusive_access, check_well_nested, oracle_step, replay
from .trace import TraceEvent, TraceProgram, TraceSyntaxError, parse, serialize

__version__ = "0.1.0"

__all__ = [
    "BorrowKind",
    "CapTag",
    "Capability",
    "Kernel",
    "KernelConfig",
    "KernelError",
    "Machine",
    "OracleState",
    "Permission",
    "RunResult",
    "TraceEvent",
    "TraceProgram",
    "TraceSyntaxError",
    "ViolationReport",
    "check_exclusive_access",
    "check_well_nested",
    "oracle_step",
    "parse",
    "replay",
    "run_program",
    "serialize",
]
