"""Thin ctypes layer over ptrace and friends (x86_64 Linux only).

Everything here must be called from the tracer thread: the kernel ties
tracees to the task that attached, so the supervisor keeps all ptrace
traffic on one dedicated thread.
"""

from __future__ import annotations

import ctypes
import os
import platform
import signal
import sys
from importlib import resources

from ..errors import CapabilityError

_libc = ctypes.CDLL(None, use_errno=True)

PTRACE_TRACEME = 0
PTRACE_PEEKDATA = 2
PTRACE_POKEDATA = 5
PTRACE_CONT = 7
PTRACE_KILL = 8
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_ATTACH = 16
PTRACE_DETACH = 17
PTRACE_SYSCALL = 24
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201

PTRACE_O_TRACESYSGOOD = 0x00000001
PTRACE_O_TRACEFORK = 0x00000002
PTRACE_O_TRACEVFORK = 0x00000004
PTRACE_O_TRACECLONE = 0x00000008
PTRACE_O_TRACEEXEC = 0x00000010
PTRACE_O_EXITKILL = 0x00100000

PTRACE_EVENT_FORK = 1
PTRACE_EVENT_VFORK = 2
PTRACE_EVENT_CLONE = 3
PTRACE_EVENT_EXEC = 4

SYSCALL_TRAP = signal.SIGTRAP | 0x80

PR_SET_NO_NEW_PRIVS = 38

NR_PRCTL = 157


class UserRegs(ctypes.Structure):
    """struct user_regs_struct for x86_64."""

    _fields_ = [
        (name, ctypes.c_ulonglong)
        for name in (
            "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10",
            "r9", "r8", "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax",
            "rip", "cs", "eflags", "rsp", "ss", "fs_base", "gs_base",
            "ds", "es", "fs", "gs",
        )
    ]

    def syscall_args(self) -> tuple[int, int, int, int, int, int]:
        return (self.rdi, self.rsi, self.rdx, self.r10, self.r8, self.r9)

    def clone(self) -> "UserRegs":
        copy = UserRegs()
        ctypes.memmove(ctypes.byref(copy), ctypes.byref(self), ctypes.sizeof(self))
        return copy


def ptrace(request: int, pid: int, addr=None, data=None) -> int:
    ctypes.set_errno(0)
    result = _libc.ptrace(
        ctypes.c_long(request),
        ctypes.c_long(pid),
        ctypes.c_void_p(addr) if isinstance(addr, int) else addr,
        ctypes.c_void_p(data) if isinstance(data, int) else data,
    )
    if result == -1:
        errno = ctypes.get_errno()
        if errno != 0:
            raise OSError(errno, f"ptrace({request}, {pid}): {os.strerror(errno)}")
    return result


def traceme() -> None:
    ptrace(PTRACE_TRACEME, 0)


def getregs(tid: int) -> UserRegs:
    regs = UserRegs()
    ptrace(PTRACE_GETREGS, tid, None, ctypes.byref(regs))
    return regs


def setregs(tid: int, regs: UserRegs) -> None:
    ptrace(PTRACE_SETREGS, tid, None, ctypes.byref(regs))


def geteventmsg(tid: int) -> int:
    msg = ctypes.c_ulong()
    ptrace(PTRACE_GETEVENTMSG, tid, None, ctypes.byref(msg))
    return msg.value


def resume_syscall(tid: int, sig: int = 0) -> None:
    ptrace(PTRACE_SYSCALL, tid, None, sig)


def set_trace_options(tid: int) -> None:
    opts = (
        PTRACE_O_TRACESYSGOOD
        | PTRACE_O_TRACEFORK
        | PTRACE_O_TRACEVFORK
        | PTRACE_O_TRACECLONE
        | PTRACE_O_TRACEEXEC
        | PTRACE_O_EXITKILL
    )
    ptrace(PTRACE_SETOPTIONS, tid, None, opts)


def read_memory(tid: int, addr: int, length: int) -> bytes:
    """Read tracee memory with process_vm_readv (tracee must be stopped)."""

    class IoVec(ctypes.Structure):
        _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]

    buf = ctypes.create_string_buffer(length)
    local = IoVec(ctypes.cast(buf, ctypes.c_void_p), length)
    remote = IoVec(ctypes.c_void_p(addr), length)
    got = _libc.process_vm_readv(
        ctypes.c_int(tid),
        ctypes.byref(local), ctypes.c_ulong(1),
        ctypes.byref(remote), ctypes.c_ulong(1),
        ctypes.c_ulong(0),
    )
    if got != length:
        errno = ctypes.get_errno()
        raise OSError(errno or 0, f"process_vm_readv({tid}, {addr:#x}, {length})")
    return buf.raw


def tgid_of(tid: int) -> int:
    """Thread group id from /proc; raises ProcessLookupError if gone."""
    try:
        with open(f"/proc/{tid}/status", "r") as fh:
            for line in fh:
                if line.startswith("Tgid:"):
                    return int(line.split()[1])
    except FileNotFoundError:
        raise ProcessLookupError(tid)
    raise ProcessLookupError(tid)


def no_new_privs(tgid: int, tid: int) -> bool:
    """The thread's no-new-privileges flag, via /proc introspection."""
    with open(f"/proc/{tgid}/task/{tid}/status", "r") as fh:
        for line in fh:
            if line.startswith("NoNewPrivs:"):
                return line.split()[1] == "1"
    return False


_syscall_names: dict[int, str] | None = None


def syscall_name(nr: int) -> str:
    """Canonical name for an x86_64 syscall number; sys_<nr> if unknown."""
    global _syscall_names
    if _syscall_names is None:
        table: dict[int, str] = {}
        text = (
            resources.files("threadbox")
            .joinpath("data/syscalls_x86_64.txt")
            .read_text(encoding="utf-8")
        )
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            num, name = line.split()
            table[int(num)] = name
        _syscall_names = table
    return _syscall_names.get(nr, f"sys_{nr}")


_probe_result: tuple[bool, str] | None = None


def probe_support() -> tuple[bool, str]:
    """Whether this host can run per-thread syscall tracing, and why not."""
    global _probe_result
    if _probe_result is not None:
        return _probe_result
    if sys.platform != "linux":
        _probe_result = (False, f"unsupported platform: {sys.platform}")
        return _probe_result
    if platform.machine() != "x86_64":
        _probe_result = (False, f"unsupported architecture: {platform.machine()}")
        return _probe_result
    try:
        pid = os.fork()
    except OSError as exc:
        _probe_result = (False, f"cannot fork: {exc}")
        return _probe_result
    if pid == 0:
        try:
            traceme()
            os.kill(os.getpid(), signal.SIGSTOP)
        finally:
            os._exit(0)
    try:
        _, status = os.waitpid(pid, 0)
        if not os.WIFSTOPPED(status):
            _probe_result = (False, "tracee did not stop")
            return _probe_result
        getregs(pid)
        ptrace(PTRACE_KILL, pid)
        os.waitpid(pid, 0)
    except OSError as exc:
        try:
            os.kill(pid, signal.SIGKILL)
            os.waitpid(pid, 0)
        except OSError:
            pass
        _probe_result = (False, f"ptrace unavailable: {exc}")
        return _probe_result
    _probe_result = (True, "")
    return _probe_result


def require_support() -> None:
    ok, reason = probe_support()
    if not ok:
        raise CapabilityError(reason)
