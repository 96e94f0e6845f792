"""Decodes raw syscall registers into classified SyscallEvents.

Socket domains come from a per-process fd table maintained at syscall exits
(socket, socketpair, accept, dup) with a /proc fallback for descriptors the
table never saw. Context that cannot be determined fails open for threads
that never sandboxed themselves (the value is irrelevant on the fast allow
path) and fails closed for sandboxed ones.
"""

from __future__ import annotations

import os
import struct
from typing import Callable, Optional

from ..errors import DecodeError
from ..promises import SyscallEvent
from .ptrace import read_memory, syscall_name

AF_UNIX = 1
AF_INET = 2
AF_INET6 = 10

CLONE_THREAD = 0x00010000

F_DUPFD = 0
F_DUPFD_CLOEXEC = 1030

_OPEN_FLAG_ARG = {"open": 1, "openat": 2, "creat": None}
_SOCKET_CALLS = {"socket", "socketpair"}
_FD_SOCKET_CALLS = {"bind", "connect", "listen", "accept", "accept4"}

_PROC_NET_TABLES = (
    "unix", "tcp", "tcp6", "udp", "udp6", "udplite", "udplite6", "raw", "raw6",
)


def _domain_from_family(family: int) -> str:
    if family in (AF_INET, AF_INET6):
        return "inet"
    if family == AF_UNIX:
        return "unix"
    return "other"


def _open_access(flags: int) -> str:
    acc = flags & os.O_ACCMODE
    if acc == os.O_WRONLY:
        return "write"
    if acc == os.O_RDWR:
        return "readwrite"
    if flags & (os.O_CREAT | os.O_TRUNC | getattr(os, "O_TMPFILE", 0)):
        return "readwrite"
    return "read"


def _socket_inode(tid: int, fd: int) -> Optional[int]:
    try:
        target = os.readlink(f"/proc/{tid}/fd/{fd}")
    except OSError:
        return None
    if not target.startswith("socket:["):
        return None
    return int(target[8:-1])


def _domain_from_proc(inode: int) -> Optional[str]:
    for table in _PROC_NET_TABLES:
        try:
            with open(f"/proc/net/{table}", "r") as fh:
                next(fh, None)
                for line in fh:
                    fields = line.split()
                    if not fields:
                        continue
                    # inode column: 6 for unix, 9 for inet tables
                    idx = 6 if table == "unix" else 9
                    if len(fields) > idx and fields[idx] == str(inode):
                        return "unix" if table == "unix" else "inet"
        except OSError:
            continue
    return None


class Decoder:
    """Stateful classifier shared by all threads of one supervision."""

    def __init__(self, mem_reader: Callable[[int, int, int], bytes] = read_memory):
        self._fd_domain: dict[int, dict[int, str]] = {}
        self._read = mem_reader

    # -- fd table maintenance ----------------------------------------------

    def fork_inherit(self, parent_tgid: int, child_tgid: int) -> None:
        self._fd_domain[child_tgid] = dict(self._fd_domain.get(parent_tgid, {}))

    def clear_process(self, tgid: int) -> None:
        self._fd_domain.pop(tgid, None)

    def after_exit(self, tid: int, tgid: int, nr: int, args, retval: int) -> None:
        """Update the fd table from a completed syscall."""
        name = syscall_name(nr)
        table = self._fd_domain.setdefault(tgid, {})
        if name == "socket" and retval >= 0:
            table[retval] = _domain_from_family(args[0])
        elif name == "socketpair" and retval == 0:
            domain = _domain_from_family(args[0])
            try:
                raw = self._read(tid, args[3], 8)
                fd0, fd1 = struct.unpack("ii", raw)
                table[fd0] = domain
                table[fd1] = domain
            except OSError:
                pass
        elif name in ("accept", "accept4") and retval >= 0:
            domain = table.get(args[0])
            if domain is not None:
                table[retval] = domain
        elif name in ("dup", "dup2", "dup3") and retval >= 0:
            domain = table.get(args[0])
            if domain is not None:
                table[retval] = domain
            else:
                table.pop(retval, None)
        elif name == "fcntl" and retval >= 0 and args[1] in (F_DUPFD, F_DUPFD_CLOEXEC):
            domain = table.get(args[0])
            if domain is not None:
                table[retval] = domain
        elif name == "close" and retval == 0:
            table.pop(args[0], None)
        elif name == "close_range" and retval == 0:
            for fd in [f for f in table if args[0] <= f <= args[1]]:
                del table[fd]

    # -- classification ------------------------------------------------------

    def _sock_domain(self, tid: int, tgid: int, name: str, args) -> Optional[str]:
        if name in _SOCKET_CALLS:
            return _domain_from_family(args[0])
        fd = args[0]
        domain = self._fd_domain.get(tgid, {}).get(fd)
        if domain is not None:
            return domain
        inode = _socket_inode(tid, fd)
        if inode is not None:
            domain = _domain_from_proc(inode)
            if domain is not None:
                return domain
        if name in ("bind", "connect"):
            # last resort: the address argument names the family
            try:
                raw = self._read(tid, args[1], 2)
                return _domain_from_family(struct.unpack("H", raw)[0])
            except OSError:
                return None
        return None

    def decode(
        self, tid: int, tgid: int, nr: int, args, sandboxed: bool
    ) -> SyscallEvent:
        """Build the classified event for a syscall entry.

        Raises DecodeError only for sandboxed threads; unsandboxed ones get
        neutral context so the fast allow path stays unconditional.
        """
        name = syscall_name(nr)
        sock_domain = None
        clone_is_thread = None
        open_access = None

        if name in _SOCKET_CALLS or name in _FD_SOCKET_CALLS:
            sock_domain = self._sock_domain(tid, tgid, name, args)
            if sock_domain is None:
                if sandboxed:
                    raise DecodeError(
                        f"cannot determine socket family for {name} fd={args[0]}"
                    )
                sock_domain = "other"
        elif name == "clone":
            clone_is_thread = bool(args[0] & CLONE_THREAD)
        elif name == "clone3":
            try:
                raw = self._read(tid, args[0], 8)
                flags = struct.unpack("Q", raw)[0]
                clone_is_thread = bool(flags & CLONE_THREAD)
            except OSError:
                if sandboxed:
                    raise DecodeError("cannot read clone3 argument struct")
                clone_is_thread = False
        elif name in _OPEN_FLAG_ARG:
            arg_index = _OPEN_FLAG_ARG[name]
            if arg_index is not None:
                open_access = _open_access(args[arg_index])

        return SyscallEvent(
            tid=tid,
            tgid=tgid,
            syscall=name,
            sock_domain=sock_domain,
            clone_is_thread=clone_is_thread,
            open_access=open_access,
        )
