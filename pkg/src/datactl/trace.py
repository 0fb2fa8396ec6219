"""I/O trace domain types, the line-delimited trace format, and windowing.

A trace file is UTF-8 text with one JSON object per line::

    {"t": 0, "x": [0.1, 2.0], "y": [1.3], "circ": {"noise_level": 0.2}, "events": []}

``t`` is an integer tick, ``x`` and ``y`` are numeric arrays of constant
length within a file, ``circ`` maps circumstance names to numbers and
``events`` is a list of tags (``"circumstance_change"`` marks a change time).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, TraceFormatError

CIRCUMSTANCE_CHANGE = "circumstance_change"

_KNOWN_KEYS = frozenset({"t", "x", "y", "circ", "events"})


@dataclass(frozen=True)
class TraceRecord:
    """One observation of a monitored system at tick ``t``."""

    t: int
    x: tuple[float, ...]
    y: tuple[float, ...]
    circ: Mapping[str, float] = field(default_factory=dict)
    events: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        out: dict = {"t": self.t, "x": list(self.x), "y": list(self.y)}
        if self.circ:
            out["circ"] = dict(self.circ)
        if self.events:
            out["events"] = sorted(self.events)
        return out


@dataclass(frozen=True)
class TraceMeta:
    x_dim: int
    y_dim: int
    circ_vocab: tuple[str, ...] = ()
    source: str = ""


@dataclass(frozen=True)
class ModelDescriptor:
    """Identity of the monitored model, carried into reports only.

    ``parameters`` is an opaque tag for the weights in use and ``loss`` names
    the performance measure; neither enters any verdict.
    """

    name: str
    environment: str = ""
    parameters: str = ""
    loss: str | None = None

    def __post_init__(self):
        if not self.name:
            raise DataError("model name must be non-empty")


@dataclass(frozen=True, eq=False)
class Trace:
    """Ordered, validated sequence of :class:`TraceRecord`.

    Construct with :meth:`from_records`; the array views (``X``, ``Y``,
    ``t``) are computed once and read-only.
    """

    records: tuple[TraceRecord, ...]
    meta: TraceMeta

    @classmethod
    def from_records(
        cls,
        records: Iterable[TraceRecord],
        source: str = "",
        vocabulary: Iterable[str] | None = None,
    ) -> "Trace":
        records = tuple(records)
        if not records:
            raise DataError("empty trace")
        x_dim, y_dim = len(records[0].x), len(records[0].y)
        vocab: set[str] = set()
        for i, rec in enumerate(records):
            if len(rec.x) != x_dim or len(rec.y) != y_dim:
                raise DataError(f"record {i}: dimension mismatch")
            if i and rec.t <= records[i - 1].t:
                raise DataError(f"record {i}: t not strictly increasing")
            vocab.update(rec.circ)
        if vocabulary is not None:
            declared = set(vocabulary)
            unknown = vocab - declared
            if unknown:
                raise DataError(f"circumstance keys outside vocabulary: {sorted(unknown)}")
            vocab = declared
        meta = TraceMeta(x_dim, y_dim, tuple(sorted(vocab)), source)
        return cls(records, meta)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            part = self.records[idx]
            if not part:
                raise DataError("empty trace")
            return Trace(part, self.meta)
        return self.records[idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return self.meta == other.meta and _records_equal(self.records, other.records)

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def X(self) -> np.ndarray:
        return _readonly(np.array([r.x for r in self.records], dtype=float).reshape(len(self), self.meta.x_dim))

    @cached_property
    def Y(self) -> np.ndarray:
        return _readonly(np.array([r.y for r in self.records], dtype=float).reshape(len(self), self.meta.y_dim))

    @cached_property
    def t(self) -> np.ndarray:
        return _readonly(np.array([r.t for r in self.records], dtype=np.int64))

    def circ_column(self, name: str) -> np.ndarray:
        """Values of circumstance ``name``; NaN where a record leaves it unspecified."""
        return np.array([r.circ.get(name, math.nan) for r in self.records], dtype=float)

    def has_circumstance(self, name: str) -> bool:
        return any(name in r.circ for r in self.records)

    def event_times(self, tag: str = CIRCUMSTANCE_CHANGE) -> list[int]:
        return [r.t for r in self.records if tag in r.events]

    def subset(self, mask: np.ndarray) -> "Trace":
        """Records where ``mask`` is true, keeping order and metadata."""
        kept = tuple(r for r, keep in zip(self.records, mask) if keep)
        if not kept:
            raise DataError("empty trace")
        return Trace(kept, self.meta)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _float_eq(a: float, b: float) -> bool:
    return a == b or (math.isnan(a) and math.isnan(b))


def _records_equal(a: Sequence[TraceRecord], b: Sequence[TraceRecord]) -> bool:
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        if ra.t != rb.t or ra.events != rb.events or set(ra.circ) != set(rb.circ):
            return False
        pairs = list(zip(ra.x, rb.x)) + list(zip(ra.y, rb.y))
        pairs += [(ra.circ[k], rb.circ[k]) for k in ra.circ]
        if len(ra.x) != len(rb.x) or len(ra.y) != len(rb.y):
            return False
        if not all(_float_eq(u, v) for u, v in pairs):
            return False
    return True


def _numbers(value, what: str, line: int) -> tuple[float, ...]:
    if not isinstance(value, list):
        raise TraceFormatError(f"'{what}' must be an array of numbers", line)
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TraceFormatError(f"'{what}' contains a non-numeric entry {v!r}", line)
        out.append(float(v))
    return tuple(out)


def parse_record(obj, line: int, strict: bool = True) -> TraceRecord:
    if not isinstance(obj, dict):
        raise TraceFormatError("record is not a JSON object", line)
    unknown = set(obj) - _KNOWN_KEYS
    if unknown and strict:
        raise TraceFormatError(f"unknown keys {sorted(unknown)}", line)
    for key in ("t", "x", "y"):
        if key not in obj:
            raise TraceFormatError(f"missing key '{key}'", line)
    t = obj["t"]
    if isinstance(t, bool) or not isinstance(t, int):
        raise TraceFormatError("'t' must be an integer", line)
    circ_raw = obj.get("circ") or {}
    if not isinstance(circ_raw, dict):
        raise TraceFormatError("'circ' must be an object", line)
    circ = {}
    for k, v in circ_raw.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TraceFormatError(f"circumstance '{k}' is not a number", line)
        circ[str(k)] = float(v)
    events = obj.get("events") or []
    if not isinstance(events, list) or not all(isinstance(e, str) for e in events):
        raise TraceFormatError("'events' must be an array of strings", line)
    return TraceRecord(t, _numbers(obj["x"], "x", line), _numbers(obj["y"], "y", line), circ, frozenset(events))


def parse_lines(lines: Iterable[str], strict: bool = True, source: str = "",
                vocabulary: Iterable[str] | None = None) -> Trace:
    """Parse trace lines; see :func:`parse_trace`."""
    vocab = set(vocabulary) if vocabulary is not None else None
    entries: list[tuple[TraceRecord, int]] = []
    dims = None
    prev_t = None
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"malformed JSON ({exc.msg})", lineno) from None
        rec = parse_record(obj, lineno, strict)
        if vocab is not None and not set(rec.circ) <= vocab:
            extra = sorted(set(rec.circ) - vocab)
            if strict:
                raise TraceFormatError(f"circumstance keys outside vocabulary: {extra}", lineno)
            rec = TraceRecord(rec.t, rec.x, rec.y, {k: v for k, v in rec.circ.items() if k in vocab}, rec.events)
        if dims is None:
            dims = (len(rec.x), len(rec.y))
        elif (len(rec.x), len(rec.y)) != dims:
            raise TraceFormatError(
                f"dimension mismatch: x/y lengths {(len(rec.x), len(rec.y))}, expected {dims}", lineno)
        if strict and prev_t is not None and rec.t <= prev_t:
            raise TraceFormatError(f"non-monotone t ({rec.t} after {prev_t})", lineno)
        prev_t = rec.t
        entries.append((rec, lineno))
    if not entries:
        raise TraceFormatError("empty trace")
    entries.sort(key=lambda e: e[0].t)
    for (a, _), (b, lineno) in zip(entries, entries[1:]):
        if a.t == b.t:
            raise TraceFormatError(f"non-monotone t (duplicate {b.t})", lineno)
    return Trace.from_records((e[0] for e in entries), source=source, vocabulary=vocab)


def parse_trace(path, strict: bool = True, vocabulary: Iterable[str] | None = None) -> Trace:
    """Read and validate a trace file.

    In strict mode unknown keys and out-of-order ticks are errors; lenient
    mode ignores unknown keys and sorts records by ``t`` (duplicates remain
    an error in both modes).
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_lines(fh, strict=strict, source=path.name, vocabulary=vocabulary)


def dumps_trace(trace: Iterable[TraceRecord]) -> str:
    return "".join(json.dumps(r.to_json()) + "\n" for r in trace)


def write_trace(trace: Iterable[TraceRecord], path) -> None:
    Path(path).write_text(dumps_trace(trace), encoding="utf-8")


def window(trace: Trace, width: int, stride: int) -> list[Trace]:
    """Consecutive slices ``[k*stride, k*stride + width)``; a trailing partial slice is dropped."""
    if width < 1 or stride < 1:
        raise DataError("width and stride must be >= 1")
    n = len(trace)
    if width > n:
        raise DataError(f"window width {width} exceeds trace length {n}")
    return [trace[k:k + width] for k in range(0, n - width + 1, stride)]
