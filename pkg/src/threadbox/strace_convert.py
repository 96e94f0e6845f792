"""Best-effort conversion of strace output into the native trace format.

strace output varies by version and flags, and plain text loses facts the
live backend knows (thread group ids, socket families for fd-only calls), so
conversion is lossy by design and quarantined here. Works best on output from
``strace -f`` with one process; threads cannot be told apart from child
processes, so everything is attributed to one tgid unless told otherwise.
"""

from __future__ import annotations

import re
from typing import Optional

from .errors import TraceParseError

# `[pid 123] openat(...)` or `123   openat(...)` or bare `openat(...)`,
# optionally preceded by -t style timestamps.
_LINE_RE = re.compile(
    r"^(?:\[pid\s+(?P<bracket_pid>\d+)\]\s*|(?P<pid>\d+)\s+)?"
    r"(?:\d{2}:\d{2}:\d{2}(?:\.\d+)?\s+|\d+\.\d+\s+)?"
    r"(?P<name>[a-z0-9_]+)\((?P<args>.*)\)\s*=\s*(?P<ret>-?\d+|0x[0-9a-f]+|\?)"
)

_SKIP_RE = re.compile(r"(\+\+\+|---|<unfinished|resumed>|<\.\.\.)")

_SA_FAMILY_RE = re.compile(r"sa_family=AF_(\w+)")

_INET_FAMILIES = {"INET", "INET6"}
_UNIX_FAMILIES = {"UNIX", "LOCAL"}

_SOCKET_CALLS = {"socket", "socketpair"}
_ADDR_CALLS = {"bind", "connect"}
_FD_ONLY_SOCKET_CALLS = {"listen", "accept", "accept4"}
_OPEN_CALLS = {"open", "openat", "openat2"}


def _family_token(name: str) -> str:
    if name in _INET_FAMILIES:
        return "inet"
    if name in _UNIX_FAMILIES:
        return "unix"
    return "other"


def _open_access(args: str) -> str:
    flags = set(re.findall(r"O_[A-Z_]+", args))
    if "O_RDWR" in flags:
        return "readwrite"
    if "O_WRONLY" in flags:
        return "write"
    if flags & {"O_CREAT", "O_TRUNC", "O_TMPFILE"}:
        # read-only open that still creates or truncates
        return "readwrite"
    return "read"


def _context_for(name: str, args: str) -> Optional[str]:
    if name in _SOCKET_CALLS:
        m = re.match(r"\s*AF_(\w+)", args)
        family = _family_token(m.group(1)) if m else "other"
        return f"sock_domain={family}"
    if name in _ADDR_CALLS:
        m = _SA_FAMILY_RE.search(args)
        family = _family_token(m.group(1)) if m else "other"
        return f"sock_domain={family}"
    if name in _FD_ONLY_SOCKET_CALLS:
        # strace shows only the fd; the family is unknowable from text
        return "sock_domain=other"
    if name in _OPEN_CALLS:
        return f"open_access={_open_access(args)}"
    if name in ("clone", "clone3"):
        is_thread = "CLONE_THREAD" in args
        return f"clone_is_thread={'true' if is_thread else 'false'}"
    return None


def convert_strace(
    text: str,
    tgid: Optional[int] = None,
    default_tid: Optional[int] = None,
) -> str:
    """Convert strace text to native trace event lines.

    tgid defaults to the first pid seen (or default_tid); lines that are not
    recognisable syscall returns (signals, exits, unfinished halves) are
    dropped. The result contains only event lines; add @register/@declare
    directives for the sandboxes you want to model.
    """
    out: list[str] = []
    resolved_tgid = tgid
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or _SKIP_RE.search(line):
            continue
        m = _LINE_RE.match(line)
        if m is None:
            continue
        pid_text = m.group("bracket_pid") or m.group("pid")
        if pid_text is not None:
            tid = int(pid_text)
        elif default_tid is not None:
            tid = default_tid
        else:
            raise TraceParseError(
                "no pid column; pass default_tid or rerun strace with -f",
                lineno,
            )
        if resolved_tgid is None:
            resolved_tgid = tid
        name = m.group("name")
        context = _context_for(name, m.group("args"))
        parts = [str(tid), str(resolved_tgid), name]
        if context is not None:
            parts.append(context)
        out.append(" ".join(parts))
    return "\n".join(out) + "\n" if out else ""
