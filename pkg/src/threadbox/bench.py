"""Overhead reporting for the decision engine and for supervised syscalls.

Numbers here are reported, never asserted: a userspace tracer pays a context
switch per syscall and is categorically slower than an in-kernel hook, so
the point of the syscalls table is its before/after/difference shape, not
parity with kernel-level measurements.
"""

from __future__ import annotations

import json
import os
import socket
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from typing import Optional

from .audit import AuditLog
from .engine import Engine
from .errors import CapabilityError
from .mapping import default_mapping
from .promises import SyscallEvent, parse_promises
from .registry import TaskRegistry

SYSCALL_ROWS = ("connect", "listen", "accept", "socketpair", "open", "getpid", "lseek")

DEFAULT_ITERATIONS = 300


# -- decision latency --------------------------------------------------------


def bench_decisions(iterations: int = 20000) -> str:
    registry = TaskRegistry()
    engine = Engine(default_mapping(), registry, audit=AuditLog())
    registry.register_process(10)
    registry.declare_promises(11, 10, parse_promises("net rpath"), name="bench")

    cases = {
        "allow-granted": SyscallEvent(11, 10, "openat", open_access="read"),
        "allow-ungated": SyscallEvent(11, 10, "futex"),
        "allow-fastpath": SyscallEvent(99, 98, "execve"),
    }
    lines = [f"mode=decisions iterations={iterations}"]
    lines.append(f"{'decision':<16}{'median (us)':>12}")
    for label, event in cases.items():
        samples = []
        for _ in range(iterations):
            t0 = time.perf_counter_ns()
            engine.evaluate(event)
            samples.append(time.perf_counter_ns() - t0)
        lines.append(f"{label:<16}{statistics.median(samples) / 1000:>12.3f}")
    return "\n".join(lines) + "\n"


# -- syscall micro-benchmarks ---------------------------------------------------


def _time_loop(fn, iterations: int) -> float:
    """Median per-call microseconds for fn()."""
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return statistics.median(samples) / 1000


def run_syscall_worker(name: str, iterations: int) -> float:
    if name == "getpid":
        return _time_loop(os.getpid, iterations)

    if name == "lseek":
        fd, path = tempfile.mkstemp()
        try:
            os.write(fd, b"x" * 16)
            return _time_loop(lambda: os.lseek(fd, 0, os.SEEK_SET), iterations)
        finally:
            os.close(fd)
            os.unlink(path)

    if name == "open":
        fd, path = tempfile.mkstemp()
        os.close(fd)
        try:
            def one():
                f = os.open(path, os.O_RDONLY)
                os.close(f)
            return _time_loop(one, iterations)
        finally:
            os.unlink(path)

    if name == "socketpair":
        def one():
            a, b = socket.socketpair()
            a.close()
            b.close()
        return _time_loop(one, iterations)

    if name == "listen":
        s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            s.bind(os.path.join(tempfile.mkdtemp(), "l.sock"))
            return _time_loop(lambda: s.listen(8), iterations)
        finally:
            s.close()

    if name == "connect":
        path = os.path.join(tempfile.mkdtemp(), "c.sock")
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        listener.bind(path)
        listener.listen(512)
        accepted = []

        def drain():
            for _ in range(iterations):
                try:
                    conn, _ = listener.accept()
                    accepted.append(conn)
                except OSError:
                    return

        t = threading.Thread(target=drain, daemon=True)
        t.start()
        samples = []
        try:
            for _ in range(iterations):
                c = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                t0 = time.perf_counter_ns()
                c.connect(path)
                samples.append(time.perf_counter_ns() - t0)
                c.close()
            return statistics.median(samples) / 1000
        finally:
            listener.close()
            t.join(5)
            for conn in accepted:
                conn.close()

    if name == "accept":
        path = os.path.join(tempfile.mkdtemp(), "a.sock")
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        listener.bind(path)
        listener.listen(512)
        clients = []

        def feed():
            for _ in range(iterations):
                try:
                    c = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                    c.connect(path)
                    clients.append(c)
                except OSError:
                    return

        t = threading.Thread(target=feed, daemon=True)
        t.start()
        samples = []
        try:
            for _ in range(iterations):
                t0 = time.perf_counter_ns()
                conn, _ = listener.accept()
                samples.append(time.perf_counter_ns() - t0)
                conn.close()
            return statistics.median(samples) / 1000
        finally:
            listener.close()
            t.join(5)
            for c in clients:
                c.close()

    raise ValueError(f"unknown syscall benchmark: {name}")


def _run_worker_to_file(name: str, iterations: int, supervised: bool) -> Optional[float]:
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "result.json")
        argv = [
            sys.executable, "-m", "threadbox.bench", name, str(iterations), out,
        ]
        if supervised:
            from .live import supervise

            sp = supervise(argv, record=False)
            code = sp.wait(600)
            if code != 0:
                raise RuntimeError(f"supervised worker {name} exited {code}")
        else:
            proc = subprocess.run(argv, timeout=600)
            if proc.returncode != 0:
                raise RuntimeError(f"worker {name} exited {proc.returncode}")
        with open(out, "r") as fh:
            return json.load(fh)["median_us"]


def bench_syscalls(iterations: int = DEFAULT_ITERATIONS) -> str:
    """Before/after/difference table over the benchmarked syscall set.

    before = plain run, after = the same worker under an (undeclared, fast
    path) supervised run. Where supervision is unavailable the after and
    difference columns hold '-'.
    """
    header = f"{'syscall':<12}{'before (us)':>14}{'after (us)':>14}{'difference':>13}"
    lines = [f"mode=syscalls iterations={iterations}", header]
    for name in SYSCALL_ROWS:
        before = _run_worker_to_file(name, iterations, supervised=False)
        try:
            after = _run_worker_to_file(name, iterations, supervised=True)
        except CapabilityError:
            after = None
        if after is None:
            after_text, diff_text = "-", "-"
        else:
            after_text = f"{after:.2f}"
            diff = (after - before) / before * 100 if before else 0.0
            diff_text = f"{diff:+.1f}%"
        lines.append(f"{name:<12}{before:>14.2f}{after_text:>14}{diff_text:>13}")
    return "\n".join(lines) + "\n"


def _worker_main(argv: list[str]) -> int:
    name, iterations = argv[0], int(argv[1])
    median = run_syscall_worker(name, iterations)
    payload = json.dumps({"syscall": name, "median_us": median})
    if len(argv) > 2:
        with open(argv[2], "w") as fh:
            fh.write(payload + "\n")
    else:
        print(payload)
    return 0


if __name__ == "__main__":
    sys.exit(_worker_main(sys.argv[1:]))
