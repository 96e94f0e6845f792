"""The syscall-to-promise mapping table.

The table is versioned data, not code: policy audits and platform variants
are diffs to a text file. Grammar (line oriented, ``#`` comments):

    syscall <name> [when <key>=<value>] -> <promise|none>

Keys and their domains: sock_domain {inet,unix,other},
clone_is_thread {true,false}, open_access {read,write,readwrite}.
Rules for one syscall must be total: either a single unconditional rule, or
conditional rules on one key covering the key's whole domain. Syscalls
absent from the table require no promise at all (default allow).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from .errors import ClassificationError, MappingError
from .promises import CONTEXT_DOMAINS, Promise, SyscallEvent, _TOKEN_TO_PROMISE

_SYSCALL_NAME_RE = re.compile(r"^[a-z0-9_]+$")

_LINE_RE = re.compile(
    r"^syscall\s+(?P<name>\S+)"
    r"(?:\s+when\s+(?P<key>\S+?)=(?P<value>\S+))?"
    r"\s+->\s+(?P<promise>\S+)$"
)


@dataclass(frozen=True)
class MappingRule:
    """One (syscall, optional condition) -> promise-or-none rule."""

    syscall: str
    context_key: Optional[str]
    context_value: Optional[str]
    promise: Optional[Promise]
    line: int = 0

    @property
    def conditional(self) -> bool:
        return self.context_key is not None


class MappingTable:
    """Validated, immutable rule set; safe for concurrent reads."""

    def __init__(self, rules: list[MappingRule]):
        by_syscall: dict[str, list[MappingRule]] = {}
        for rule in rules:
            by_syscall.setdefault(rule.syscall, []).append(rule)
        for syscall, group in by_syscall.items():
            _validate_group(syscall, group)
        self._by_syscall = by_syscall
        self.rules = tuple(rules)

    def rules_for(self, syscall: str) -> tuple[MappingRule, ...]:
        return tuple(self._by_syscall.get(syscall, ()))

    def mapped_syscalls(self) -> tuple[str, ...]:
        return tuple(sorted(self._by_syscall))

    def required_promise(self, event: SyscallEvent) -> Optional[Promise]:
        """The promise this event demands, or None if unmapped/uncovered.

        Raises ClassificationError when the syscall is mapped with
        conditional rules but the event lacks the discriminating context.
        That is a backend decoding bug and must never silently allow.
        """
        group = self._by_syscall.get(event.syscall)
        if group is None:
            return None
        first = group[0]
        if not first.conditional:
            return first.promise
        value = event.context_value(first.context_key)
        if value is None:
            raise ClassificationError(
                f"{event.syscall} is mapped on {first.context_key} but the "
                f"event carries no {first.context_key}"
            )
        for rule in group:
            if rule.context_value == value:
                return rule.promise
        raise ClassificationError(
            f"no {event.syscall} rule matches {first.context_key}={value}"
        )

    def context_key_for(self, syscall: str) -> Optional[str]:
        """The context key this syscall's rules discriminate on, if any."""
        group = self._by_syscall.get(syscall)
        if not group:
            return None
        return group[0].context_key

    def candidate_promises(self, syscall: str) -> list[Promise]:
        """Every promise the syscall's rules can demand, in id order."""
        group = self._by_syscall.get(syscall, ())
        return sorted({r.promise for r in group if r.promise is not None})


def _validate_group(syscall: str, group: list[MappingRule]) -> None:
    unconditional = [r for r in group if not r.conditional]
    conditional = [r for r in group if r.conditional]
    if unconditional and conditional:
        raise MappingError(
            f"syscall {syscall}: unconditional rule overlaps conditional ones",
            line=conditional[0].line,
        )
    if len(unconditional) > 1:
        raise MappingError(
            f"syscall {syscall}: duplicate rule", line=unconditional[1].line
        )
    if not conditional:
        return
    key = conditional[0].context_key
    seen: dict[str, MappingRule] = {}
    for rule in conditional:
        if rule.context_key != key:
            raise MappingError(
                f"syscall {syscall}: rules mix context keys {key} and "
                f"{rule.context_key}",
                line=rule.line,
            )
        if rule.context_value in seen:
            raise MappingError(
                f"syscall {syscall}: overlapping condition "
                f"{key}={rule.context_value}",
                line=rule.line,
            )
        seen[rule.context_value] = rule
    domain = CONTEXT_DOMAINS[key]
    missing = [v for v in domain if v not in seen]
    if missing:
        raise MappingError(
            f"syscall {syscall}: rules do not cover {key}={missing[0]} "
            f"(totality check failed)",
            line=conditional[0].line,
        )


def parse_mapping(text: str) -> MappingTable:
    """Parse and validate a mapping-table document."""
    rules: list[MappingRule] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE_RE.match(line)
        if m is None:
            raise MappingError(f"malformed rule: {raw.strip()!r}", line=lineno)
        name = m.group("name")
        if not _SYSCALL_NAME_RE.match(name):
            raise MappingError(f"bad syscall name: {name!r}", line=lineno)
        key = m.group("key")
        value = m.group("value")
        if key is not None:
            domain = CONTEXT_DOMAINS.get(key)
            if domain is None:
                raise MappingError(f"unknown context key: {key!r}", line=lineno)
            if value not in domain:
                raise MappingError(
                    f"bad value for {key}: {value!r} "
                    f"(expected one of {', '.join(domain)})",
                    line=lineno,
                )
        token = m.group("promise")
        if token == "none":
            promise = None
        else:
            promise = _TOKEN_TO_PROMISE.get(token)
            if promise is None:
                raise MappingError(f"unknown promise: {token!r}", line=lineno)
        rules.append(MappingRule(name, key, value, promise, line=lineno))
    return MappingTable(rules)


def load_mapping_table(path: str) -> MappingTable:
    """Load a mapping table from a file path."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_mapping(fh.read())


_default_table: Optional[MappingTable] = None


def default_mapping() -> MappingTable:
    """The bundled default table (cached; immutable)."""
    global _default_table
    if _default_table is None:
        text = (
            resources.files("threadbox")
            .joinpath("data/default_mapping.txt")
            .read_text(encoding="utf-8")
        )
        _default_table = parse_mapping(text)
    return _default_table
