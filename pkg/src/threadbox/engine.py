"""Decision engine: mapping table + registry -> verdict per syscall event.

Checks run before the syscall takes effect. Threads of processes that never
opted in, and threads that never declared, always take the fast allow path
with no promise lookup at all. A violation in enforce mode kills the whole
process; in complain mode it is logged and execution continues, with every
required promise accumulated into the thread's learning report.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Optional

from .audit import MODE_COMPLAIN, MODE_ENFORCE, MODE_LEARN_EXIT, AuditLog
from .errors import LearningError
from .mapping import MappingTable
from .promises import Promise, PromiseSet, SyscallEvent, promises_to_string
from .registry import TaskRegistry


class Verdict(str, enum.Enum):
    ALLOW = "allow"
    KILL = "kill"
    LOG_ONLY = "log-only"

    def __str__(self) -> str:  # keep report formatting free of Enum noise
        return self.value


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    promise: Optional[Promise] = None
    reason: str = ""

    def __post_init__(self) -> None:
        if self.verdict in (Verdict.KILL, Verdict.LOG_ONLY) and self.promise is None:
            raise ValueError(f"{self.verdict} decisions must carry a promise")


@dataclass(frozen=True)
class KillDirective:
    """Kill the whole process, not just the offending thread."""

    tgid: int


def kill_semantics(tgid: int) -> KillDirective:
    """The process-wide directive produced after a KILL decision."""
    return KillDirective(tgid=tgid)


@dataclass(frozen=True)
class LearningReport:
    name: str
    tid: int
    tgid: int
    used: PromiseSet

    @property
    def promise_string(self) -> str:
        return promises_to_string(self.used)


class _LearningSlot:
    __slots__ = ("name", "used", "frozen")

    def __init__(self, name: str):
        self.name = name
        self.used: set[Promise] = set()
        self.frozen = False


class Engine:
    """Evaluates syscall events against declared promises.

    evaluate() is reentrant; learning accumulation is synchronized so
    decisions for distinct tasks may be computed in parallel.
    """

    def __init__(
        self,
        mapping: MappingTable,
        registry: TaskRegistry,
        audit: Optional[AuditLog] = None,
    ):
        self.mapping = mapping
        self.registry = registry
        self.audit = audit
        self._learning: dict[tuple[int, int], _LearningSlot] = {}
        self._learning_lock = threading.Lock()

    def evaluate(self, event: SyscallEvent) -> Decision:
        entry = self.registry.lookup(event.tid, event.tgid)
        if entry is None:
            if not self.registry.is_registered(event.tgid):
                return Decision(Verdict.ALLOW, reason="unregistered")
            return Decision(Verdict.ALLOW, reason="undeclared")

        required = self.mapping.required_promise(event)
        if required is None:
            return Decision(Verdict.ALLOW, reason="ungated")

        # Read-write open access needs the read category on top of the
        # table's wpath; report order (and learning) follow promise ids.
        needed = [required]
        if required is Promise.WPATH and event.open_access == "readwrite":
            needed = [Promise.RPATH, Promise.WPATH]

        if entry.complain:
            self._accumulate(event.tid, event.tgid, needed)

        missing = [p for p in needed if p not in entry.promises]
        if not missing:
            return Decision(Verdict.ALLOW, required, reason="granted")

        violated = missing[0]
        if entry.complain:
            if self.audit is not None:
                self.audit.log(
                    name=entry.name,
                    tid=event.tid,
                    tgid=event.tgid,
                    mode=MODE_COMPLAIN,
                    syscall=event.syscall,
                    promise=violated.token,
                )
            return Decision(Verdict.LOG_ONLY, violated, reason="complain")
        if self.audit is not None:
            self.audit.log(
                name=entry.name,
                tid=event.tid,
                tgid=event.tgid,
                mode=MODE_ENFORCE,
                syscall=event.syscall,
                promise=violated.token,
            )
        return Decision(Verdict.KILL, violated, reason="violation")

    # -- learning ----------------------------------------------------------

    def start_learning(self, tid: int, tgid: int, name: str = "") -> None:
        """Open a learning slot for a complain-mode thread."""
        with self._learning_lock:
            self._learning.setdefault((tgid, tid), _LearningSlot(name))

    def _accumulate(self, tid: int, tgid: int, promises: list[Promise]) -> None:
        with self._learning_lock:
            slot = self._learning.get((tgid, tid))
            if slot is None or slot.frozen:
                return
            slot.used.update(promises)

    def finalize_learning(self, tid: int, tgid: int) -> LearningReport:
        """Freeze and return the thread's report; later events are ignored.

        Emits a learn-exit summary record carrying the full used-promise
        string. Finalizing twice returns the same frozen report without a
        second summary record.
        """
        with self._learning_lock:
            slot = self._learning.get((tgid, tid))
            if slot is None:
                raise LearningError(
                    f"task tid={tid} tgid={tgid} has no learning entry"
                )
            first = not slot.frozen
            slot.frozen = True
            report = LearningReport(
                name=slot.name,
                tid=tid,
                tgid=tgid,
                used=PromiseSet.from_iterable(slot.used),
            )
        if first and self.audit is not None:
            self.audit.log(
                name=report.name,
                tid=tid,
                tgid=tgid,
                mode=MODE_LEARN_EXIT,
                syscall="-",
                promise=report.promise_string,
            )
        return report

    def learning_tasks(self, tgid: Optional[int] = None) -> list[tuple[int, int]]:
        """(tid, tgid) of unfinalized learning slots, oldest first."""
        with self._learning_lock:
            return [
                (t, g)
                for (g, t), slot in self._learning.items()
                if not slot.frozen and (tgid is None or g == tgid)
            ]
