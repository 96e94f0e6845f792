"""threadbox command line: replay, learn, run, bench, check-mapping, convert.

Exit codes are a stable contract:
    0  success / replay with no kills
    2  usage, parse, or validation errors
    3  replay produced at least one kill
    4  live supervision unavailable on this host
A supervised child's own exit status passes through `run`; a child killed
for a violation exits with 137 (128 + SIGKILL).
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from . import bench
from .audit import AuditLog
from .errors import (
    CapabilityError,
    LearningError,
    MappingError,
    ThreadboxError,
    TraceParseError,
)
from .mapping import MappingTable, default_mapping, load_mapping_table
from .strace_convert import convert_strace
from .trace import learn_from_trace, load_trace, replay

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_KILLED = 3
EXIT_UNSUPPORTED = 4


def _load_mapping(path: Optional[str]) -> MappingTable:
    if path is None:
        return default_mapping()
    return load_mapping_table(path)


def _open_audit(log_file: Optional[str]) -> AuditLog:
    if log_file is None:
        return AuditLog()
    return AuditLog(sink=open(log_file, "a", encoding="utf-8"))


def cmd_replay(args) -> int:
    try:
        mapping = _load_mapping(args.mapping)
        lines = load_trace(args.trace, mapping=mapping)
    except (TraceParseError, MappingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    result = replay(lines, mapping=mapping, audit=_open_audit(args.log_file))
    if args.format == "jsonl":
        sys.stdout.write(result.to_jsonl())
    else:
        sys.stdout.write(result.to_text())
    return EXIT_KILLED if result.killed else EXIT_OK


def cmd_learn(args) -> int:
    try:
        mapping = _load_mapping(args.mapping)
        lines = load_trace(args.trace, mapping=mapping)
        learned = learn_from_trace(
            lines, mapping=mapping, audit=_open_audit(args.log_file)
        )
    except (TraceParseError, MappingError, LearningError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, promises in learned:
        print(f"{name}: {promises}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .live import supervise

    if not args.command:
        print("error: no command given (use: threadbox run -- CMD...)", file=sys.stderr)
        return EXIT_ERROR
    try:
        mapping = _load_mapping(args.mapping)
    except (MappingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    audit = _open_audit(args.log_file)
    try:
        process = supervise(
            args.command, mapping=mapping, audit=audit,
            record=args.record is not None,
        )
    except CapabilityError as exc:
        print(f"error: live supervision unavailable: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except ThreadboxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    code = process.wait(timeout=None if args.timeout == 0 else args.timeout)
    if process.kill_info is not None:
        info = process.kill_info
        print(
            f"threadbox: killed tgid={info.tgid} "
            f"promise={info.decision.promise.token} "
            f"syscall={info.event.syscall if info.event else '-'}",
            file=sys.stderr,
        )
    if args.record is not None:
        with open(args.record, "w", encoding="utf-8") as fh:
            fh.write(process.recording_text())
    return code


def cmd_bench(args) -> int:
    if args.mode == "decisions":
        sys.stdout.write(bench.bench_decisions(args.iterations or 20000))
        return EXIT_OK
    sys.stdout.write(bench.bench_syscalls(args.iterations or bench.DEFAULT_ITERATIONS))
    return EXIT_OK


def cmd_check_mapping(args) -> int:
    try:
        table = load_mapping_table(args.mapping)
    except (MappingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"ok: {len(table.rules)} rules over {len(table.mapped_syscalls())} syscalls")
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        with open(args.strace, "r", encoding="utf-8") as fh:
            native = convert_strace(fh.read(), tgid=args.tgid, default_tid=args.tid)
    except (TraceParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.output is None:
        sys.stdout.write(native)
    else:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(native)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="threadbox",
        description="Per-thread promise-based sandboxing: replay, learn, enforce.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("replay", help="replay a recorded trace through the engine")
    p.add_argument("--trace", required=True, help="trace file")
    p.add_argument("--mapping", help="mapping table file (default: bundled)")
    p.add_argument("--format", choices=("text", "jsonl"), default="text")
    p.add_argument("--log-file", help="append audit log lines to this file")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("learn", help="derive promise strings from a learning trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--mapping", help="mapping table file (default: bundled)")
    p.add_argument("--log-file", help="append audit log lines to this file")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("run", help="run a command under live enforcement")
    p.add_argument("--mapping", help="mapping table file (default: bundled)")
    p.add_argument("--log-file", help="append audit log lines to this file")
    p.add_argument("--record", help="write the observed native trace to this file")
    p.add_argument("--timeout", type=float, default=0,
                   help="kill the child after this many seconds (0 = none)")
    p.add_argument("command", nargs=argparse.REMAINDER,
                   help="-- command and arguments")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="emit overhead report tables")
    p.add_argument("--mode", choices=("decisions", "syscalls"), required=True)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check-mapping", help="validate a mapping table file")
    p.add_argument("--mapping", required=True)
    p.set_defaults(func=cmd_check_mapping)

    p = sub.add_parser("convert", help="convert strace output to the native format")
    p.add_argument("--strace", required=True, help="strace output file")
    p.add_argument("--tgid", type=int, help="process id to attribute events to")
    p.add_argument("--tid", type=int, help="thread id when strace had no pid column")
    p.add_argument("-o", "--output", help="write result here instead of stdout")
    p.set_defaults(func=cmd_convert)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    command = getattr(args, "command", None)
    if command and command[0] == "--":
        args.command = command[1:]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
