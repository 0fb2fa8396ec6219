"""datactl: black-box I/O trace analysis, property checks and runtime monitoring for AI systems."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import DataError, DatactlWarning, InsufficientDataError, TraceFormatError
from .trace import ModelDescriptor, Trace, TraceRecord, parse_trace, write_trace

__all__ = [
    "DataError",
    "DatactlWarning",
    "InsufficientDataError",
    "ModelDescriptor",
    "Trace",
    "TraceFormatError",
    "TraceRecord",
    "__version__",
    "parse_trace",
    "write_trace",
]
