"""Promises, promise sets, and the syscall event model.

A promise is a coarse permission category that unlocks a group of syscalls.
There are exactly seven. A thread's sandbox is the set of promises it
declared, stored as a bitmask: granting promise ``p`` sets bit ``p.value``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .errors import PromiseParseError


class Promise(enum.IntEnum):
    """The seven promises. Values are bit positions and are stable."""

    PROC = 0
    RPATH = 1
    WPATH = 2
    NET = 3
    ID = 4
    IPC = 5
    THREADING = 6

    @property
    def token(self) -> str:
        """Canonical lower-case spelling used in promise strings and logs."""
        return self.name.lower()


# "unix" and "gui" are accepted spellings of the ipc promise; canonical
# output is always "ipc".
_TOKEN_TO_PROMISE: dict[str, Promise] = {p.token: p for p in Promise}
_TOKEN_TO_PROMISE["unix"] = Promise.IPC
_TOKEN_TO_PROMISE["gui"] = Promise.IPC

ALL_PROMISES: tuple[Promise, ...] = tuple(Promise)
_ALL_BITS = (1 << len(ALL_PROMISES)) - 1


@dataclass(frozen=True)
class PromiseSet:
    """An immutable set of promises backed by a bitmask."""

    bits: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.bits <= _ALL_BITS:
            raise ValueError(f"promise bitmask out of range: {self.bits:#x}")

    @classmethod
    def of(cls, *promises: Promise) -> "PromiseSet":
        bits = 0
        for p in promises:
            bits |= 1 << p.value
        return cls(bits)

    @classmethod
    def from_iterable(cls, promises: Iterable[Promise]) -> "PromiseSet":
        return cls.of(*promises)

    def __contains__(self, promise: Promise) -> bool:
        return bool(self.bits >> promise.value & 1)

    def __iter__(self) -> Iterator[Promise]:
        return (p for p in ALL_PROMISES if p in self)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    def __bool__(self) -> bool:
        return self.bits != 0

    def __or__(self, other: "PromiseSet") -> "PromiseSet":
        return PromiseSet(self.bits | other.bits)

    def add(self, promise: Promise) -> "PromiseSet":
        """Return a new set with ``promise`` granted (idempotent)."""
        return PromiseSet(self.bits | 1 << promise.value)

    def issubset(self, other: "PromiseSet") -> bool:
        return self.bits & other.bits == self.bits

    def __str__(self) -> str:
        return promises_to_string(self)


EMPTY_SET = PromiseSet(0)


def parse_promises(text: str) -> PromiseSet:
    """Parse a space-separated promise string into a PromiseSet.

    The empty (or whitespace-only) string is the empty set: stdio-equivalent
    behaviour is always allowed by default and never spelled out. Unknown
    tokens are a hard error naming the token; no partial set is returned.
    """
    bits = 0
    for token in text.split():
        promise = _TOKEN_TO_PROMISE.get(token)
        if promise is None:
            raise PromiseParseError(f"unknown promise token: {token!r}")
        bits |= 1 << promise.value
    return PromiseSet(bits)


def promises_to_string(promises: PromiseSet) -> str:
    """Format a PromiseSet as its canonical promise string (id order)."""
    return " ".join(p.token for p in promises)


# Context keys a syscall mapping rule may condition on, with their value
# domains. A rule set for one syscall must cover its key's full domain.
SOCK_DOMAINS = ("inet", "unix", "other")
CLONE_KINDS = ("true", "false")
OPEN_ACCESSES = ("read", "write", "readwrite")

CONTEXT_DOMAINS: dict[str, tuple[str, ...]] = {
    "sock_domain": SOCK_DOMAINS,
    "clone_is_thread": CLONE_KINDS,
    "open_access": OPEN_ACCESSES,
}


@dataclass(frozen=True)
class SyscallEvent:
    """One observed syscall with decoded classification context.

    Context fields are populated only when the syscall's mapping rules need
    them: sock_domain for socket-family calls, clone_is_thread for clone,
    open_access for the open family.
    """

    tid: int
    tgid: int
    syscall: str
    sock_domain: Optional[str] = None
    clone_is_thread: Optional[bool] = None
    open_access: Optional[str] = None

    def __post_init__(self) -> None:
        if self.tid < 1 or self.tgid < 1:
            raise ValueError(f"tid/tgid must be >= 1, got {self.tid}/{self.tgid}")
        if self.sock_domain is not None and self.sock_domain not in SOCK_DOMAINS:
            raise ValueError(f"bad sock_domain: {self.sock_domain!r}")
        if self.open_access is not None and self.open_access not in OPEN_ACCESSES:
            raise ValueError(f"bad open_access: {self.open_access!r}")

    def context_value(self, key: str) -> Optional[str]:
        """The event's value for a mapping context key, as grammar text."""
        if key == "sock_domain":
            return self.sock_domain
        if key == "clone_is_thread":
            if self.clone_is_thread is None:
                return None
            return "true" if self.clone_is_thread else "false"
        if key == "open_access":
            return self.open_access
        raise KeyError(key)
