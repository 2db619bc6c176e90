"""``capsim`` command line: run, check and fuzz.

Exit codes are 0 for a clean result, 2 when violations, expectation
mismatches or fuzz discrepancies are found, and 1 for usage, parse and
internal errors.
"""
from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import fuzz as fuzzing
from .kernel import KernelConfig
from .machine import DEFAULT_POOL_SIZE, Machine
from .trace import TraceSyntaxError, load

REPORT_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_FOUND = 0, 1, 2


class _Usage(Exception):
    pass


def _kernel_config(args) -> KernelConfig:
    return KernelConfig(raw_pointer_relaxation=not args.no_raw_relax, cell_relaxation=not args.no_cell_relax)


def _load(path: Path):
    try:
        return load(path)
    except TraceSyntaxError as err:
        raise _Usage(f"{path}:{err.line}:{err.column}: {err.kind}: {err.message}") from None
    except OSError as err:
        raise _Usage(f"{path}: {err.strerror or err}") from None


def _execute(program, args):
    machine = Machine(
        _kernel_config(args), mode=args.mode, on_violation=args.on_violation, pool_size=args.pool_size
    )
    start = time.perf_counter()
    result = machine.run(program)
    return result, time.perf_counter() - start


def _text_report(path, program, result, wall) -> str:
    m = result.machine
    executed = sum(v is not None for v in result.verdicts)
    lines = [
        f"{path}: {executed}/{len(program)} events, {result.caps_created} capabilities, "
        f"{result.caps_invalidated} invalidated, {wall * 1000:.1f} ms"
    ]
    for r in result.reports:
        lines.append(f"violation at event {r.event_index} (line {r.line}): {r.kind}")
        if r.cap is not None:
            lines.append(f"  capability {r.cap}, parent chain {' -> '.join(map(str, r.parents))}")
        if r.addr is not None:
            width = "" if r.width is None else f", width {r.width}"
            lines.append(f"  address {r.addr:#x}{width}")
        lines.append(f"  {r.message}")
    for d in m.diagnostics:
        lines.append(f"note at event {d.event_index}: {d.kind}: {d.message}")
    if not result.reports:
        lines.append("ok")
    return "\n".join(lines)


def _json_report(path, program, result, wall) -> str:
    body = {
        "version": REPORT_VERSION,
        "trace": str(path),
        "events": len(program),
        "verdict": "ok" if not result.reports else "violations",
        "violations": [r.to_dict() for r in result.reports],
        "diagnostics": [
            {"event_index": d.event_index, "kind": d.kind, "message": d.message} for d in result.machine.diagnostics
        ],
        "stats": {
            "caps_created": result.caps_created,
            "caps_invalidated": result.caps_invalidated,
            "events_executed": sum(v is not None for v in result.verdicts),
            "wall_time": round(wall, 6),
        },
    }
    return json.dumps(body, indent=2)


def cmd_run(args) -> int:
    path = Path(args.path)
    program = _load(path)
    result, wall = _execute(program, args)
    render = _json_report if args.report == "json" else _text_report
    print(render(path, program, result, wall))
    return EXIT_FOUND if result.reports else EXIT_OK


def _check_files(target: Path) -> list:
    if target.is_dir():
        files = sorted(target.rglob("*.cap"))
        if not files:
            raise _Usage(f"{target}: no .cap files")
        return files
    return [target]


def cmd_check(args) -> int:
    files = _check_files(Path(args.path))
    programs = [(path, _load(path)) for path in files]  # parse everything before running anything
    mismatches = 0
    for path, program in programs:
        result, _ = _execute(program, args)
        bad = []
        for ev, verdict in zip(program.events, result.verdicts):
            if ev.expect is None:
                continue
            got = "not executed" if verdict is None else verdict
            if got != ev.expect:
                bad.append(f"{path}:{ev.line}: expected {ev.expect}, got {got}")
        checked = sum(ev.expect is not None for ev in program.events)
        if bad:
            mismatches += len(bad)
            print(f"FAIL {path} ({len(bad)} of {checked} expectations)")
            for line in bad:
                print(f"  {line}")
        else:
            print(f"ok   {path} ({checked} expectations)")
    print(f"{len(programs)} files, {mismatches} mismatches")
    return EXIT_FOUND if mismatches else EXIT_OK


def _kernel_factory(target):
    if not target:
        return None
    module, sep, attr = target.partition(":")
    if not sep:
        raise _Usage(f"--kernel expects MODULE:ATTR, got {target!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as err:
        raise _Usage(f"--kernel {target}: {err}") from None


def cmd_fuzz(args) -> int:
    seed = args.seed
    env = os.environ.get("CAPSIM_SEED")
    if env is not None:
        try:
            seed = int(env, 0)
        except ValueError:
            raise _Usage(f"CAPSIM_SEED must be an integer, got {env!r}") from None
    if args.traces < 0 or args.events < 0 or args.jobs < 1:
        raise _Usage("--traces and --events must be nonnegative and --jobs positive")
    config = fuzzing.FuzzConfig(
        seed=seed, events=args.events, traces=args.traces, kernel=_kernel_config(args), mode=args.mode
    )
    factory = _kernel_factory(args.kernel)
    start = time.perf_counter()
    report = fuzzing.run_differential(
        config, kernel_factory=factory, jobs=args.jobs, shrink_failures=not args.no_shrink
    )
    wall = time.perf_counter() - start
    print(
        f"seed {seed}: {report.traces} traces x {config.events} events, "
        f"{report.rejected_traces} rejected, {report.caps_created} capabilities, "
        f"{report.caps_invalidated} invalidated, {wall:.1f} s"
    )
    for kind, count in sorted(report.verdicts.items()):
        print(f"  {kind:26} {count}")
    if report.ok:
        print("no discrepancies")
        return EXIT_OK
    paths = fuzzing.write_reproducers(report, args.out)
    print(f"{len(report.discrepancies)} discrepancies; reproducers in {args.out}")
    for d, path in zip(report.discrepancies, paths):
        size = len(d.shrunk if d.shrunk is not None else d.trace)
        print(f"  trace {d.index}: {d.what} at event {d.step} -> {path} ({size} events)")
    return EXIT_FOUND


def _machine_flags(p, on_violation):
    p.add_argument("--mode", choices=("compat", "strict"), default="compat")
    p.add_argument("--on-violation", choices=("halt", "continue"), default=on_violation)
    p.add_argument("--pool-size", type=int, default=DEFAULT_POOL_SIZE)
    p.add_argument("--no-raw-relax", action="store_true", help="disable the raw-pointer relaxation")
    p.add_argument("--no-cell-relax", action="store_true", help="disable the interior-mutability relaxation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsim", description="Revoke-on-use capability simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one trace and report violations")
    run.add_argument("path")
    _machine_flags(run, "halt")
    run.add_argument("--report", choices=("text", "json"), default="text")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="compare expect directives with actual verdicts")
    check.add_argument("path", help="a .cap file or a directory searched recursively")
    _machine_flags(check, "continue")
    check.set_defaults(func=cmd_check)

    fz = sub.add_parser("fuzz", help="differential fuzzing against the reference oracle")
    fz.add_argument("--seed", type=int, default=0)
    fz.add_argument("--traces", type=int, default=1000)
    fz.add_argument("--events", type=int, default=128)
    fz.add_argument("--jobs", type=int, default=1)
    fz.add_argument("--out", default="fuzz-out", help="directory for reproducers")
    fz.add_argument("--mode", choices=("compat", "strict"), default="compat")
    fz.add_argument("--no-raw-relax", action="store_true")
    fz.add_argument("--no-cell-relax", action="store_true")
    fz.add_argument("--no-shrink", action="store_true")
    fz.add_argument("--kernel", default=None, help=argparse.SUPPRESS)
    fz.set_defaults(func=cmd_fuzz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)
    if getattr(args, "pool_size", 1) < 1:
        print("capsim: --pool-size must be positive", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except _Usage as err:
        print(f"capsim: {err}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as err:  # noqa: BLE001 - the exit-code contract covers internal errors
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(f"capsim: internal error: {err!r}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
