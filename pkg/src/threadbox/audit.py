"""Violation and learning log, the userspace stand-in for the kernel log.

Every record renders as one fixed-format line so the stream stays greppable:

    threadbox: [<name>] tid=<tid> tgid=<tgid> mode=<mode> syscall=<syscall> promise=<promise> verdict=<verdict>

Values containing whitespace (learn-exit promise strings, empty strings) are
double-quoted. An empty sandbox name falls back to ``tid:<tid>``.
"""

from __future__ import annotations

import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import IO, Optional

MODE_ENFORCE = "enforce"
MODE_COMPLAIN = "complain"
MODE_LEARN_EXIT = "learn-exit"
MODE_WARN = "warn"

VERDICT_KILLED = "killed"
VERDICT_LOGGED = "logged"
VERDICT_SUMMARY = "summary"
VERDICT_WARNED = "warned"

_MODE_VERDICTS = {
    MODE_ENFORCE: VERDICT_KILLED,
    MODE_COMPLAIN: VERDICT_LOGGED,
    MODE_LEARN_EXIT: VERDICT_SUMMARY,
    MODE_WARN: VERDICT_WARNED,
}


@dataclass(frozen=True)
class ViolationRecord:
    timestamp: float
    name: str
    tid: int
    tgid: int
    mode: str
    syscall: str
    promise: str
    verdict: str

    def __post_init__(self) -> None:
        expected = _MODE_VERDICTS.get(self.mode)
        if expected is None:
            raise ValueError(f"unknown audit mode: {self.mode!r}")
        if self.verdict != expected:
            raise ValueError(
                f"verdict {self.verdict!r} inconsistent with mode {self.mode!r}"
            )


def _field(value: str) -> str:
    if value == "" or any(c.isspace() for c in value):
        return f'"{value}"'
    return value


def format_line(record: ViolationRecord) -> str:
    name = record.name if record.name else f"tid:{record.tid}"
    return (
        f"threadbox: [{name}] tid={record.tid} tgid={record.tgid} "
        f"mode={record.mode} syscall={_field(record.syscall)} "
        f"promise={_field(record.promise)} verdict={record.verdict}"
    )


_LINE_RE = re.compile(
    r"^threadbox: \[(?P<name>.*?)\] tid=(?P<tid>\d+) tgid=(?P<tgid>\d+) "
    r'mode=(?P<mode>\S+) syscall=(?:"(?P<qsyscall>[^"]*)"|(?P<syscall>\S+)) '
    r'promise=(?:"(?P<qpromise>[^"]*)"|(?P<promise>\S+)) '
    r"verdict=(?P<verdict>\S+)$"
)


def parse_line(line: str) -> dict:
    """Recover the fields of a formatted line (inverse of format_line)."""
    m = _LINE_RE.match(line)
    if m is None:
        raise ValueError(f"not a threadbox log line: {line!r}")
    name = m.group("name")
    tid = int(m.group("tid"))
    if name == f"tid:{tid}":
        name = ""
    syscall = m.group("qsyscall")
    if syscall is None:
        syscall = m.group("syscall")
    promise = m.group("qpromise")
    if promise is None:
        promise = m.group("promise")
    return {
        "name": name,
        "tid": tid,
        "tgid": int(m.group("tgid")),
        "mode": m.group("mode"),
        "syscall": syscall,
        "promise": promise,
        "verdict": m.group("verdict"),
    }


class AuditLog:
    """Thread-safe ring buffer of records plus an optional line sink.

    Overflow drops the oldest record and bumps ``dropped``; sink write
    failures propagate to the caller rather than vanishing.
    """

    def __init__(self, capacity: int = 8192, sink: Optional[IO[str]] = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._records: deque[ViolationRecord] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self._sink = sink
        self.capacity = capacity
        self.dropped = 0

    def emit(self, record: ViolationRecord) -> str:
        line = format_line(record)
        with self._lock:
            if len(self._records) == self.capacity:
                self.dropped += 1
            self._records.append(record)
            if self._sink is not None:
                self._sink.write(line + "\n")
                self._sink.flush()
        return line

    def log(
        self,
        *,
        name: str,
        tid: int,
        tgid: int,
        mode: str,
        syscall: str,
        promise: str,
    ) -> ViolationRecord:
        """Build, store, and format a record; returns it."""
        record = ViolationRecord(
            timestamp=time.monotonic(),
            name=name,
            tid=tid,
            tgid=tgid,
            mode=mode,
            syscall=syscall,
            promise=promise,
            verdict=_MODE_VERDICTS[mode],
        )
        self.emit(record)
        return record

    def query(
        self,
        *,
        name: Optional[str] = None,
        tgid: Optional[int] = None,
        mode: Optional[str] = None,
    ) -> list[ViolationRecord]:
        """Chronological records matching every given filter."""
        with self._lock:
            snapshot = list(self._records)
        out = []
        for r in snapshot:
            if name is not None and r.name != name:
                continue
            if tgid is not None and r.tgid != tgid:
                continue
            if mode is not None and r.mode != mode:
                continue
            out.append(r)
        return out

    def lines(self) -> list[str]:
        with self._lock:
            return [format_line(r) for r in self._records]

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)
