"""Exception hierarchy shared by all modules.

Every error raised on purpose by the library derives from ``EEServeError``.
The CLI maps ``UsageError``/``ConfigError``/``FormatError``/``ValidationError``
to exit status 2 and everything else to 1.
"""

from __future__ import annotations


class EEServeError(Exception):
    """Base class for library errors."""


class UsageError(EEServeError):
    """Bad command-line usage or unknown option value."""


class ConfigError(EEServeError):
    """Invalid configuration (distribution rows, policy bounds, ...)."""


class FormatError(EEServeError):
    """A file could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ValidationError(EEServeError):
    """Parsed data violates a hard invariant."""


class DomainError(EEServeError, ValueError):
    """Argument outside the operation's domain."""


class CapacityError(EEServeError):
    """A load plan does not fit in device memory."""


class StalenessError(EEServeError):
    """Policy asked to decide without the required profiles."""


class IntegrityError(EEServeError):
    """Event log is malformed or out of order."""
