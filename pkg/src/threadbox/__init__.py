"""threadbox: per-thread, promise-based sandboxing in userspace.

Sandboxes attach to individual threads, never inherit to children, and are
declared once via a short promise string. The package provides the policy
core (promises, syscall mapping, registry, decision engine, audit log), a
deterministic trace-replay backend, and a ptrace-based live supervisor.
"""

from .audit import AuditLog, ViolationRecord, format_line, parse_line
from .engine import (
    Decision,
    Engine,
    KillDirective,
    LearningReport,
    Verdict,
    kill_semantics,
)
from .errors import (
    CapabilityError,
    CapacityError,
    ClassificationError,
    ControlProtocolError,
    DecodeError,
    LearningError,
    MappingError,
    PromiseParseError,
    ThreadboxError,
    TraceParseError,
    UnregisteredProcessError,
)
from .mapping import (
    MappingRule,
    MappingTable,
    default_mapping,
    load_mapping_table,
    parse_mapping,
)
from .promises import (
    Promise,
    PromiseSet,
    SyscallEvent,
    parse_promises,
    promises_to_string,
)
from .registry import ProcessRegistration, SandboxEntry, TaskRegistry
from .trace import (
    ReplayResult,
    ReplayStep,
    TraceDirective,
    TraceEvent,
    learn_from_trace,
    load_trace,
    parse_trace,
    replay,
)

__version__ = "0.1.0"
