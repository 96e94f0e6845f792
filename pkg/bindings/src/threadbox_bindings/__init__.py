"""Developer API for programs running under a threadbox supervisor.

Three calls mirror the kernel-style interface:

    sandbox_ps()                         opt the process in, once
    permissions("net rpath", "login")    sandbox the calling thread
    @sandbox_function("wpath", "Extract file")
    def extract(...): ...                run a function in its own sandboxed thread

This module is a pure protocol client: it finds the supervisor's control
socket in THREADBOX_CTRL and writes the four endpoints (sandbox_ps,
promises, debug, complain) over one shared connection. All enforcement
happens supervisor-side, so everything here is testable against a mock
channel with no privileges.

The connection is opened before any thread of this process is sandboxed;
afterwards a sandboxed thread only ever reads and writes an already-open
descriptor, which no promise gates.
"""

from __future__ import annotations

import ctypes
import functools
import os
import socket
import threading
import warnings
from dataclasses import dataclass
from typing import Optional

CTRL_ENV = "THREADBOX_CTRL"
PERMISSIVE_ENV = "THREADBOX_PERMISSIVE"

PR_SET_NO_NEW_PRIVS = 38

__all__ = [
    "ChannelError",
    "FunctionSandboxSpec",
    "MissingChannelError",
    "SandboxDeniedError",
    "WriteOnceWarning",
    "permissions",
    "sandbox_function",
    "sandbox_ps",
]


class ChannelError(Exception):
    """The control channel failed or refused a request."""


class MissingChannelError(ChannelError):
    """THREADBOX_CTRL is not set: this process has no supervisor."""


class SandboxDeniedError(ChannelError):
    """The supervisor rejected a sandbox request (err response)."""


class WriteOnceWarning(UserWarning):
    """A thread tried to declare promises a second time."""


@dataclass(frozen=True)
class FunctionSandboxSpec:
    """Arguments for one function sandbox: promises, debug name, complain."""

    promises: str
    name: str = ""
    complain: bool = False


class _Channel:
    """One connection per process, writes serialized under a lock."""

    def __init__(self):
        self._lock = threading.Lock()
        self._reg_lock = threading.Lock()
        self._sock: Optional[socket.socket] = None
        self._pid = -1
        self._registered_pid = -1

    def _connect_locked(self) -> socket.socket:
        pid = os.getpid()
        if self._sock is not None and self._pid == pid:
            return self._sock
        # a fork invalidates the parent's connection
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
        address = os.environ.get(CTRL_ENV)
        if not address:
            raise MissingChannelError(
                f"{CTRL_ENV} is not set; run this program under the supervisor"
            )
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            sock.connect(address)
        except OSError as exc:
            sock.close()
            raise ChannelError(f"cannot reach control channel {address}: {exc}")
        self._sock = sock
        self._pid = pid
        return sock

    def request(self, endpoint: str, payload: str = "") -> str:
        tid = threading.get_native_id()
        tgid = os.getpid()
        body = f"{endpoint} {tid} {tgid}"
        if payload:
            body += f" {payload}"
        with self._lock:
            sock = self._connect_locked()
            try:
                sock.sendall(body.encode("utf-8") + b"\n")
                buf = b""
                while not buf.endswith(b"\n"):
                    chunk = sock.recv(4096)
                    if not chunk:
                        raise ChannelError("control channel closed by supervisor")
                    buf += chunk
            except OSError as exc:
                raise ChannelError(f"control channel i/o failed: {exc}")
        response = buf.decode("utf-8").strip()
        if response.startswith("err "):
            raise SandboxDeniedError(response[4:])
        return response

    def register_once(self) -> bool:
        """Send sandbox_ps at most once per process. True if sent."""
        with self._reg_lock:
            if self._registered_pid == os.getpid():
                return False
            self.request("sandbox_ps")
            self._registered_pid = os.getpid()
            return True


_channel = _Channel()


def _permissive() -> bool:
    return os.environ.get(PERMISSIVE_ENV, "") not in ("", "0", "false")


def _set_no_new_privs() -> None:
    libc = ctypes.CDLL(None, use_errno=True)
    if libc.prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0:
        errno = ctypes.get_errno()
        raise ChannelError(f"prctl(PR_SET_NO_NEW_PRIVS) failed: {os.strerror(errno)}")


def sandbox_ps() -> bool:
    """Declare that this process will sandbox one of its threads.

    Imposes no restrictions by itself; it lets the supervisor skip promise
    checks for processes that never opt in. Idempotent per process. Returns
    True when running under a supervisor, False in permissive mode without
    one; raises MissingChannelError otherwise.
    """
    if CTRL_ENV not in os.environ and _permissive():
        return False
    _channel.register_once()
    return True


def permissions(promises: str, debug_name: str = "", complain: bool = False) -> bool:
    """Put the calling thread into a sandbox with the given promise string.

    Promises are fixed on first declaration; a repeated call changes nothing
    and raises WriteOnceWarning. The thread's no-new-privileges flag is set
    before declaring. Returns True when enforced, False in permissive mode
    without a supervisor.
    """
    if CTRL_ENV not in os.environ and _permissive():
        return False
    if debug_name:
        _channel.request("debug", debug_name)
    if complain:
        _channel.request("complain", "true")
    _set_no_new_privs()
    response = _channel.request("promises", promises.strip())
    if "note=write-once" in response:
        warnings.warn(
            "promises already declared for this thread; call ignored",
            WriteOnceWarning,
            stacklevel=2,
        )
    return True


def sandbox_function(promises, name: str = "", complain: bool = False):
    """Run the decorated function in a new thread under its own sandbox.

    The wrapper launches the function in a fresh thread, declares the given
    promises there (the caller's sandbox state is untouched in both
    directions), waits for it to finish, returns its value, and re-raises
    its exception. A denied syscall kills the whole process by design, so
    there is no catchable enforcement error.

    Arguments follow the permissions() order: promises, name, complain. A
    whitespace-only promise string grants nothing (empty set).
    """
    if isinstance(promises, FunctionSandboxSpec):
        spec = promises
    else:
        spec = FunctionSandboxSpec(promises=promises, name=name, complain=complain)

    def decorate(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            outcome: dict = {}

            def runner():
                try:
                    sandbox_ps()
                    permissions(spec.promises, spec.name, spec.complain)
                    outcome["value"] = func(*args, **kwargs)
                except BaseException as exc:
                    outcome["error"] = exc

            thread = threading.Thread(
                target=runner, name=f"sandbox:{spec.name or func.__name__}"
            )
            thread.start()
            thread.join()
            if "error" in outcome:
                raise outcome["error"]
            return outcome["value"]

        return wrapper

    return decorate
