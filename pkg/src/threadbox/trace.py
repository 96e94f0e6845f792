"""Recorded-trace parsing and deterministic replay.

Trace grammar (UTF-8, line oriented, ``#`` comments, shell-style quoting):

    <tid> <tgid> <syscall> [key=value ...]          # one observed syscall
    @register <tgid>
    @declare <tid> <tgid> "<promises>" [name=<label>] [complain=<bool>]
    @exit <tid> <tgid>
    @exit_process <tgid>

Directives and events share one total order; seq is the source line number.
Replay drives a fresh registry and engine, so traces from different runs
never interact. A kill marks every later event of that process post-kill.
"""

from __future__ import annotations

import json
import shlex
from dataclasses import dataclass, field
from typing import Optional, Union

from .audit import AuditLog
from .engine import Decision, Engine, LearningReport, Verdict, kill_semantics
from .errors import ClassificationError, LearningError, TraceParseError
from .mapping import MappingTable, default_mapping
from .promises import (
    CONTEXT_DOMAINS,
    PromiseSet,
    SyscallEvent,
    parse_promises,
)
from .registry import TaskRegistry

_DEFAULT = object()  # sentinel: "use the bundled mapping"

REGISTER = "register"
DECLARE = "declare"
EXIT = "exit"
EXIT_PROCESS = "exit_process"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    tid: int
    tgid: int
    syscall: str
    sock_domain: Optional[str] = None
    clone_is_thread: Optional[bool] = None
    open_access: Optional[str] = None

    def to_syscall_event(self) -> SyscallEvent:
        return SyscallEvent(
            tid=self.tid,
            tgid=self.tgid,
            syscall=self.syscall,
            sock_domain=self.sock_domain,
            clone_is_thread=self.clone_is_thread,
            open_access=self.open_access,
        )


@dataclass(frozen=True)
class TraceDirective:
    seq: int
    kind: str
    tgid: int
    tid: Optional[int] = None
    promises: Optional[PromiseSet] = None
    name: str = ""
    complain: bool = False


TraceLine = Union[TraceEvent, TraceDirective]


def _parse_int(token: str, what: str, lineno: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise TraceParseError(f"{what} is not an integer: {token!r}", lineno)
    if value < 1:
        raise TraceParseError(f"{what} must be >= 1: {value}", lineno)
    return value


def _parse_bool(token: str, what: str, lineno: int) -> bool:
    if token == "true":
        return True
    if token == "false":
        return False
    raise TraceParseError(f"{what} must be true or false: {token!r}", lineno)


def _parse_directive(tokens: list[str], lineno: int) -> TraceDirective:
    head = tokens[0]
    if head == "@register":
        if len(tokens) != 2:
            raise TraceParseError("@register takes exactly <tgid>", lineno)
        return TraceDirective(lineno, REGISTER, _parse_int(tokens[1], "tgid", lineno))
    if head == "@declare":
        if len(tokens) < 4:
            raise TraceParseError(
                '@declare takes <tid> <tgid> "<promises>" [name=..] [complain=..]',
                lineno,
            )
        tid = _parse_int(tokens[1], "tid", lineno)
        tgid = _parse_int(tokens[2], "tgid", lineno)
        try:
            promises = parse_promises(tokens[3])
        except ValueError as exc:
            raise TraceParseError(str(exc), lineno)
        name = ""
        complain = False
        for extra in tokens[4:]:
            key, sep, value = extra.partition("=")
            if not sep:
                raise TraceParseError(f"bad declare option: {extra!r}", lineno)
            if key == "name":
                name = value
            elif key == "complain":
                complain = _parse_bool(value, "complain", lineno)
            else:
                raise TraceParseError(f"unknown declare option: {key!r}", lineno)
        return TraceDirective(
            lineno, DECLARE, tgid, tid=tid, promises=promises,
            name=name, complain=complain,
        )
    if head == "@exit":
        if len(tokens) != 3:
            raise TraceParseError("@exit takes <tid> <tgid>", lineno)
        return TraceDirective(
            lineno, EXIT,
            _parse_int(tokens[2], "tgid", lineno),
            tid=_parse_int(tokens[1], "tid", lineno),
        )
    if head == "@exit_process":
        if len(tokens) != 2:
            raise TraceParseError("@exit_process takes exactly <tgid>", lineno)
        return TraceDirective(
            lineno, EXIT_PROCESS, _parse_int(tokens[1], "tgid", lineno)
        )
    raise TraceParseError(f"unknown directive: {head!r}", lineno)


def _parse_event(tokens: list[str], lineno: int) -> TraceEvent:
    if len(tokens) < 3:
        raise TraceParseError(
            "event lines need <tid> <tgid> <syscall> [key=value ...]", lineno
        )
    tid = _parse_int(tokens[0], "tid", lineno)
    tgid = _parse_int(tokens[1], "tgid", lineno)
    syscall = tokens[2]
    context: dict[str, str] = {}
    for extra in tokens[3:]:
        key, sep, value = extra.partition("=")
        if not sep:
            raise TraceParseError(f"bad context token: {extra!r}", lineno)
        domain = CONTEXT_DOMAINS.get(key)
        if domain is None:
            raise TraceParseError(f"unknown context key: {key!r}", lineno)
        if value not in domain:
            raise TraceParseError(
                f"bad value for {key}: {value!r} "
                f"(expected one of {', '.join(domain)})",
                lineno,
            )
        if key in context:
            raise TraceParseError(f"duplicate context key: {key}", lineno)
        context[key] = value
    clone_is_thread: Optional[bool] = None
    if "clone_is_thread" in context:
        clone_is_thread = context["clone_is_thread"] == "true"
    return TraceEvent(
        seq=lineno,
        tid=tid,
        tgid=tgid,
        syscall=syscall,
        sock_domain=context.get("sock_domain"),
        clone_is_thread=clone_is_thread,
        open_access=context.get("open_access"),
    )


def parse_trace(text: str, mapping=_DEFAULT) -> list[TraceLine]:
    """Parse a trace document into validated lines.

    Unknown syscalls are kept (they map to no promise). With a mapping table
    (bundled one by default), events for mapped syscalls must carry the
    context their rules discriminate on; pass mapping=None to skip that
    check and validate structure only.
    """
    if mapping is _DEFAULT:
        mapping = default_mapping()
    lines: list[TraceLine] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise TraceParseError(f"bad quoting: {exc}", lineno)
        if not tokens:
            continue
        if tokens[0].startswith("@"):
            lines.append(_parse_directive(tokens, lineno))
            continue
        event = _parse_event(tokens, lineno)
        if mapping is not None:
            try:
                mapping.required_promise(event.to_syscall_event())
            except ClassificationError as exc:
                raise TraceParseError(f"missing context: {exc}", lineno)
        lines.append(event)
    return lines


def load_trace(path: str, mapping=_DEFAULT) -> list[TraceLine]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh.read(), mapping=mapping)


POST_KILL = "post-kill"


@dataclass(frozen=True)
class ReplayStep:
    seq: int
    tid: int
    tgid: int
    syscall: str
    decision: Optional[Decision]  # None means the line was post-kill

    @property
    def post_kill(self) -> bool:
        return self.decision is None


@dataclass
class ReplayResult:
    steps: list[ReplayStep] = field(default_factory=list)
    kill_points: dict[int, int] = field(default_factory=dict)
    learning: list[LearningReport] = field(default_factory=list)

    @property
    def kill_point(self) -> Optional[int]:
        if not self.kill_points:
            return None
        return min(self.kill_points.values())

    @property
    def killed(self) -> bool:
        return bool(self.kill_points)

    def to_text(self) -> str:
        out = []
        for step in self.steps:
            if step.post_kill:
                verdict, promise, reason = POST_KILL, "-", "-"
            else:
                verdict = str(step.decision.verdict)
                promise = (
                    step.decision.promise.token
                    if step.decision.promise is not None
                    else "-"
                )
                reason = step.decision.reason
            out.append(
                f"seq={step.seq} tid={step.tid} tgid={step.tgid} "
                f"syscall={step.syscall} verdict={verdict} "
                f"promise={promise} reason={reason}"
            )
        for tgid in sorted(self.kill_points):
            out.append(f"kill tgid={tgid} seq={self.kill_points[tgid]}")
        for report in self.learning:
            name = report.name if report.name else f"tid:{report.tid}"
            out.append(
                f'learned name="{name}" promises="{report.promise_string}"'
            )
        kills = len(self.kill_points)
        out.append(f"summary events={len(self.steps)} kills={kills}")
        return "\n".join(out) + "\n"

    def to_jsonl(self) -> str:
        out = []
        for step in self.steps:
            obj: dict = {
                "type": "event",
                "seq": step.seq,
                "tid": step.tid,
                "tgid": step.tgid,
                "syscall": step.syscall,
            }
            if step.post_kill:
                obj.update(verdict=POST_KILL, promise=None, reason=None)
            else:
                obj.update(
                    verdict=str(step.decision.verdict),
                    promise=(
                        step.decision.promise.token
                        if step.decision.promise is not None
                        else None
                    ),
                    reason=step.decision.reason,
                )
            out.append(obj)
        for tgid in sorted(self.kill_points):
            out.append({"type": "kill", "tgid": tgid, "seq": self.kill_points[tgid]})
        for report in self.learning:
            out.append(
                {
                    "type": "learned",
                    "name": report.name if report.name else f"tid:{report.tid}",
                    "promises": report.promise_string,
                }
            )
        out.append(
            {
                "type": "summary",
                "events": len(self.steps),
                "kills": len(self.kill_points),
            }
        )
        return "\n".join(json.dumps(obj, sort_keys=True) for obj in out) + "\n"


def replay(
    lines: list[TraceLine],
    mapping: Optional[MappingTable] = None,
    audit: Optional[AuditLog] = None,
) -> ReplayResult:
    """Replay parsed lines through a fresh registry and engine."""
    if mapping is None:
        mapping = default_mapping()
    registry = TaskRegistry(audit=audit)
    engine = Engine(mapping, registry, audit=audit)
    result = ReplayResult()
    dead: set[int] = set()

    def finalize(tid: int, tgid: int) -> None:
        try:
            report = engine.finalize_learning(tid, tgid)
        except LearningError:
            return
        result.learning.append(report)

    for line in lines:
        if isinstance(line, TraceDirective):
            if line.tgid in dead:
                continue
            if line.kind == REGISTER:
                registry.register_process(line.tgid)
            elif line.kind == DECLARE:
                _, created = registry.declare_promises(
                    line.tid,
                    line.tgid,
                    line.promises,
                    name=line.name,
                    debug=bool(line.name),
                    complain=line.complain,
                )
                if created and line.complain:
                    engine.start_learning(line.tid, line.tgid, name=line.name)
            elif line.kind == EXIT:
                finalize(line.tid, line.tgid)
                registry.remove_task(line.tid, line.tgid)
            elif line.kind == EXIT_PROCESS:
                for tid, tgid in engine.learning_tasks(line.tgid):
                    finalize(tid, tgid)
                registry.remove_process(line.tgid)
            continue

        if line.tgid in dead:
            result.steps.append(
                ReplayStep(line.seq, line.tid, line.tgid, line.syscall, None)
            )
            continue
        decision = engine.evaluate(line.to_syscall_event())
        result.steps.append(
            ReplayStep(line.seq, line.tid, line.tgid, line.syscall, decision)
        )
        if decision.verdict is Verdict.KILL:
            directive = kill_semantics(line.tgid)
            result.kill_points[directive.tgid] = line.seq
            dead.add(directive.tgid)
            for tid, tgid in engine.learning_tasks(directive.tgid):
                finalize(tid, tgid)
            registry.remove_process(directive.tgid)

    for tid, tgid in engine.learning_tasks():
        finalize(tid, tgid)
    return result


def learn_from_trace(
    lines: list[TraceLine],
    mapping: Optional[MappingTable] = None,
    audit: Optional[AuditLog] = None,
) -> list[tuple[str, str]]:
    """Learning-mode summary: one minimal promise string per sandbox.

    The trace must declare at least one complain-mode sandbox.
    """
    if not any(
        isinstance(l, TraceDirective) and l.kind == DECLARE and l.complain
        for l in lines
    ):
        raise LearningError("trace declares no complain-mode sandboxes")
    result = replay(lines, mapping=mapping, audit=audit)
    out = []
    for report in result.learning:
        name = report.name if report.name else f"tid:{report.tid}"
        out.append((name, report.promise_string))
    return out
