"""Registry of opted-in processes and sandboxed threads.

Thread ids are not unique across processes, so entries are keyed by
(tgid, tid). Promises are write-once: the first declaration wins and later
ones only produce a warning record. Sandboxes are never inherited; the only
way an entry appears is an explicit declaration by that thread.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Optional

from .audit import MODE_WARN, AuditLog
from .errors import CapacityError, UnregisteredProcessError
from .promises import PromiseSet

MAX_NAME_BYTES = 64

DEFAULT_MAX_PROCESSES = 1024
DEFAULT_MAX_THREADS = 4096


@dataclass(frozen=True)
class SandboxEntry:
    tid: int
    tgid: int
    promises: PromiseSet
    name: str = ""
    complain: bool = False
    debug: bool = False
    declared: bool = True


@dataclass(frozen=True)
class ProcessRegistration:
    tgid: int
    registered_at: float


def _truncate_name(name: str) -> tuple[str, bool]:
    raw = name.encode("utf-8")
    if len(raw) <= MAX_NAME_BYTES:
        return name, False
    return raw[:MAX_NAME_BYTES].decode("utf-8", errors="ignore"), True


class TaskRegistry:
    """Bounded map of process registrations and per-thread sandbox entries.

    All operations are atomic with respect to each other; lookups and
    mutations may come from any number of interceptor threads.
    """

    def __init__(
        self,
        max_processes: int = DEFAULT_MAX_PROCESSES,
        max_threads: int = DEFAULT_MAX_THREADS,
        audit: Optional[AuditLog] = None,
    ):
        self._lock = threading.Lock()
        self._processes: dict[int, ProcessRegistration] = {}
        self._entries: dict[tuple[int, int], SandboxEntry] = {}
        self._max_processes = max_processes
        self._max_threads = max_threads
        self._audit = audit

    def register_process(self, tgid: int) -> None:
        """Opt a process in. Idempotent; refuses beyond capacity."""
        if tgid < 1:
            raise ValueError(f"tgid must be >= 1, got {tgid}")
        with self._lock:
            if tgid in self._processes:
                return
            if len(self._processes) >= self._max_processes:
                raise CapacityError(
                    f"process capacity {self._max_processes} exhausted"
                )
            self._processes[tgid] = ProcessRegistration(tgid, time.monotonic())

    def is_registered(self, tgid: int) -> bool:
        with self._lock:
            return tgid in self._processes

    def declare_promises(
        self,
        tid: int,
        tgid: int,
        promises: PromiseSet,
        name: str = "",
        debug: bool = False,
        complain: bool = False,
    ) -> tuple[SandboxEntry, bool]:
        """Create the thread's sandbox entry. Returns (entry, created).

        Promises are fixed by the first declaration. A repeated declaration
        changes nothing, returns the existing entry with created=False, and
        leaves a warning in the audit log.
        """
        if tid < 1 or tgid < 1:
            raise ValueError(f"tid/tgid must be >= 1, got {tid}/{tgid}")
        name, truncated = _truncate_name(name)
        with self._lock:
            if tgid not in self._processes:
                raise UnregisteredProcessError(
                    f"process {tgid} never registered (write sandbox_ps first)"
                )
            key = (tgid, tid)
            existing = self._entries.get(key)
            if existing is not None:
                warn = self._audit
                entry = existing
            else:
                if len(self._entries) >= self._max_threads:
                    raise CapacityError(
                        f"thread capacity {self._max_threads} exhausted"
                    )
                entry = SandboxEntry(
                    tid=tid,
                    tgid=tgid,
                    promises=promises,
                    name=name,
                    complain=complain,
                    debug=debug,
                )
                self._entries[key] = entry
                warn = self._audit if truncated else None
        if existing is not None:
            if warn is not None:
                warn.log(
                    name=entry.name,
                    tid=tid,
                    tgid=tgid,
                    mode=MODE_WARN,
                    syscall="-",
                    promise="write-once",
                )
            return entry, False
        if warn is not None:
            warn.log(
                name=entry.name,
                tid=tid,
                tgid=tgid,
                mode=MODE_WARN,
                syscall="-",
                promise="name-truncated",
            )
        return entry, True

    def lookup(self, tid: int, tgid: int) -> Optional[SandboxEntry]:
        with self._lock:
            return self._entries.get((tgid, tid))

    def remove_task(self, tid: int, tgid: int) -> None:
        """Drop a thread's entry. Idempotent."""
        with self._lock:
            self._entries.pop((tgid, tid), None)

    def remove_process(self, tgid: int) -> None:
        """Process exit: clear the registration and every entry of tgid."""
        with self._lock:
            self._processes.pop(tgid, None)
            for key in [k for k in self._entries if k[0] == tgid]:
                del self._entries[key]

    def entries_for(self, tgid: int) -> list[SandboxEntry]:
        with self._lock:
            return [e for (g, _), e in self._entries.items() if g == tgid]

    def size(self, tgid: Optional[int] = None) -> int:
        with self._lock:
            if tgid is None:
                return len(self._entries)
            return sum(1 for (g, _) in self._entries if g == tgid)

    def process_count(self) -> int:
        with self._lock:
            return len(self._processes)
