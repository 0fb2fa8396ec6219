"""Exception and warning types shared across datactl."""

from __future__ import annotations


class DataError(ValueError):
    """Input data or parameters violate an operation's preconditions."""


class TraceFormatError(DataError):
    """A trace file could not be parsed.

    ``line`` is the 1-based line number of the offending record, or ``None``
    for whole-file problems such as an empty trace.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientDataError(DataError):
    """Not enough samples (or overlap) to compute a statistic."""


class DatactlWarning(UserWarning):
    """Non-fatal estimation or classification caveat."""
