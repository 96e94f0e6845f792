"""Live backend: ptrace supervision, syscall decoding, control channel."""

from .control import CTRL_ENV, ENDPOINTS, ControlServer, format_request, parse_request
from .decoder import Decoder
from .ptrace import no_new_privs, probe_support, require_support
from .supervisor import KILL_EXIT_CODE, SupervisedProcess, supervise

__all__ = [
    "CTRL_ENV",
    "ENDPOINTS",
    "ControlServer",
    "Decoder",
    "KILL_EXIT_CODE",
    "SupervisedProcess",
    "format_request",
    "no_new_privs",
    "parse_request",
    "probe_support",
    "require_support",
    "supervise",
]
