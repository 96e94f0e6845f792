"""Exception types shared across the threadbox package."""


class ThreadboxError(Exception):
    """Base class for errors raised by threadbox."""


class PromiseParseError(ThreadboxError, ValueError):
    """A promise string contained a token that is not a known promise."""


class MappingError(ThreadboxError, ValueError):
    """A mapping-table document failed to load or validate."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ClassificationError(ThreadboxError):
    """A mapped syscall arrived without the context its rules require.

    This signals a backend decoding bug, never a policy violation by the
    sandboxed code, and must not be silently treated as an allow.
    """


class CapacityError(ThreadboxError):
    """The registry refused a new process or thread: configured cap reached."""


class UnregisteredProcessError(ThreadboxError):
    """A thread tried to declare promises before its process opted in."""


class LearningError(ThreadboxError):
    """A learning report was requested for a task that was never learning."""


class TraceParseError(ThreadboxError, ValueError):
    """A trace document contained a malformed or invalid line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CapabilityError(ThreadboxError):
    """The host cannot run live supervision (platform or privileges)."""


class ControlProtocolError(ThreadboxError):
    """A control-channel message violated the endpoint grammar."""


class DecodeError(ThreadboxError):
    """The live backend could not decode required context from a raw syscall."""
