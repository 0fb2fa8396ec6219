"""Hazard imagination for misused inputs.

When a runtime record fails the out-of-distribution checks, templates from
a declarative knowledge base propose synthetic substitute inputs built from
the last valid input. Each case is scored by prior times empirical
plausibility under the reference profile, then ranked by risk.

A knowledge base is a JSON list of templates such as::

    {"id": "hold_last", "prior": 0.6, "severity": 0.4,
     "when": [{"stat": "mean", "feature": 0, "op": "<", "value": 5}],
     "generator": {"offset": [0.0], "noise_std": 0.1, "extrapolate": false}}
"""

from __future__ import annotations

import hashlib
import json
import operator
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, DatactlWarning
from .monitor import ReferenceProfile, classify_ood_record
from .trace import TraceRecord

BUFFER_SIZE = 100
TOP_K = 3

_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
        "==": operator.eq, "!=": operator.ne}
_STATS = ("mean", "min", "max", "last", "trend")


@dataclass(frozen=True)
class Condition:
    stat: str
    feature: int
    op: str
    value: float

    def __post_init__(self):
        if self.stat not in _STATS:
            raise DataError(f"unknown statistic {self.stat!r}; expected one of {_STATS}")
        if self.op not in _OPS:
            raise DataError(f"unknown comparison {self.op!r}")
        if self.feature < 0:
            raise DataError("feature index must be >= 0")


@dataclass(frozen=True)
class Generator:
    """Substitute input = base + offset + noise_std * N(0, 1).

    The base is the last valid input, or its linear extrapolation one step
    ahead along the buffer trend when ``extrapolate`` is set.
    """

    offset: tuple[float, ...] = ()
    noise_std: tuple[float, ...] | float = 0.0
    extrapolate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))
        if isinstance(self.noise_std, (int, float)):
            std = float(self.noise_std)
            if std < 0:
                raise DataError("noise_std must be >= 0")
        else:
            std = tuple(float(v) for v in self.noise_std)
            if any(v < 0 for v in std):
                raise DataError("noise_std must be >= 0")
        object.__setattr__(self, "noise_std", std)

    def produce(self, base: np.ndarray, trend: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        dim = len(base)
        offset = np.asarray(self.offset) if self.offset else np.zeros(dim)
        std = np.asarray(self.noise_std) if isinstance(self.noise_std, tuple) else np.full(dim, self.noise_std)
        if offset.shape != (dim,) or std.shape != (dim,):
            raise DataError(f"generator output dimension does not match input dimension {dim}")
        start = base + trend if self.extrapolate else base
        return start + offset + std * rng.standard_normal(dim)


@dataclass(frozen=True)
class HazardTemplate:
    id: str
    prior: float
    severity: float
    when: tuple[Condition, ...] = ()
    generator: Generator = Generator()

    def __post_init__(self):
        if not self.id:
            raise DataError("template id must be non-empty")
        for name in ("prior", "severity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"template {self.id!r}: {name} must lie in [0, 1]")
        object.__setattr__(self, "when", tuple(c if isinstance(c, Condition) else Condition(**c) for c in self.when))
        if isinstance(self.generator, Mapping):
            object.__setattr__(self, "generator", Generator(**self.generator))

    def applies(self, stats: Mapping[str, np.ndarray]) -> bool:
        for c in self.when:
            col = stats[c.stat]
            if c.feature >= len(col):
                raise DataError(f"template {self.id!r}: feature {c.feature} out of range")
            if not _OPS[c.op](float(col[c.feature]), c.value):
                return False
        return True


def load_kb(obj) -> list[HazardTemplate]:
    """Templates from a parsed JSON list (or a path to one); ids must be unique."""
    if isinstance(obj, (str, Path)):
        obj = json.loads(Path(obj).read_text(encoding="utf-8"))
    if not isinstance(obj, list):
        raise DataError("knowledge base must be a JSON list of templates")
    try:
        kb = [HazardTemplate(**t) for t in obj]
    except TypeError as exc:
        raise DataError(f"invalid hazard template: {exc}") from None
    ids = [t.id for t in kb]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate template ids in knowledge base")
    return kb


class RuntimeBuffer:
    """Ring of the last ``capacity`` records with their validity flags."""

    def __init__(self, capacity: int = BUFFER_SIZE):
        if capacity < 1:
            raise DataError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._ring: deque[tuple[TraceRecord, bool]] = deque(maxlen=capacity)
        self.last_valid: TraceRecord | None = None

    def __len__(self) -> int:
        return len(self._ring)

    def push(self, record: TraceRecord, valid: bool) -> None:
        self._ring.append((record, valid))
        if valid:
            self.last_valid = record

    def records(self) -> list[TraceRecord]:
        return [r for r, _ in self._ring]

    def valid_inputs(self) -> np.ndarray:
        rows = [r.x for r, ok in self._ring if ok]
        if not rows and self.last_valid is not None:
            rows = [self.last_valid.x]
        return np.array(rows, dtype=float)

    def statistics(self) -> dict[str, np.ndarray]:
        """Per-feature mean/min/max/last/trend over valid buffered inputs; trend is the least-squares slope per record."""
        if self.last_valid is None:
            raise DataError("no last-valid state")
        X = self.valid_inputs()
        if len(X) > 1:
            idx = np.arange(len(X), dtype=float)
            idx -= idx.mean()
            trend = idx @ (X - X.mean(axis=0)) / (idx @ idx)
        else:
            trend = np.zeros(X.shape[1])
        return {"mean": X.mean(axis=0), "min": X.min(axis=0), "max": X.max(axis=0),
                "last": np.asarray(self.last_valid.x, dtype=float), "trend": trend}

    def digest(self) -> bytes:
        payload = json.dumps([[r.to_json(), ok] for r, ok in self._ring], sort_keys=True)
        return hashlib.sha256(payload.encode()).digest()


@dataclass(frozen=True)
class ImaginedCase:
    template: str
    input: tuple[float, ...]
    prior: float = 1.0
    severity: float = 0.0
    probability: float | None = None
    clamped: bool = False

    @property
    def risk(self) -> float | None:
        if self.probability is None:
            return None
        return self.probability * self.severity

    def to_json(self) -> dict:
        return {"template": self.template, "input": list(self.input), "prior": self.prior,
                "probability": self.probability,
                "severity": self.severity, "risk": self.risk, "clamped": self.clamped}


class CriticalCaseBuffer:
    """Misused records kept for later harvesting; appended to a JSONL file when a path is set."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.cases: list[dict] = []

    def add(self, record: TraceRecord, tags: set[str]) -> None:
        entry = {"record": record.to_json(), "tags": sorted(tags)}
        self.cases.append(entry)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, allow_nan=True) + "\n")


def detect_misuse(record: TraceRecord, profile: ReferenceProfile,
                  critical: CriticalCaseBuffer | None = None) -> tuple[bool, set[str]]:
    tags = classify_ood_record(record, profile)
    if tags and critical is not None:
        critical.add(record, tags)
    return bool(tags), tags


def imagine_hazards(buffer: RuntimeBuffer, kb: Sequence[HazardTemplate]) -> list[ImaginedCase]:
    """One unscored case per template whose conditions hold on the buffer statistics."""
    stats = buffer.statistics()
    base = np.asarray(buffer.last_valid.x, dtype=float)
    digest = buffer.digest()
    cases = []
    for tpl in kb:
        if not tpl.applies(stats):
            continue
        seed = int.from_bytes(hashlib.sha256(digest + tpl.id.encode()).digest()[:8], "big")
        x = tpl.generator.produce(base, stats["trend"], np.random.default_rng(seed))
        cases.append(ImaginedCase(tpl.id, tuple(float(v) for v in x), tpl.prior, tpl.severity))
    return cases


def evaluate_probability(case: ImaginedCase, profile: ReferenceProfile) -> ImaginedCase:
    """Score a case: prior times the reference input density of its cell relative to the modal cell."""
    cell, outside = profile.binning.x_cells(np.asarray(case.input, dtype=float)[None, :])
    density = profile.density
    plausibility = float(density[cell[0]] / density.max())
    return ImaginedCase(case.template, case.input, case.prior, case.severity,
                        case.prior * plausibility, bool(outside[0]))


def select_high_risk(cases: Iterable[ImaginedCase], k: int = TOP_K) -> list[ImaginedCase]:
    if k < 1:
        raise DataError("k must be >= 1")
    cases = list(cases)
    if not cases:
        warnings.warn("no imagined cases to select from", DatactlWarning, stacklevel=2)
        return []
    if any(c.risk is None for c in cases):
        raise DataError("cases must be scored before selection")
    return sorted(cases, key=lambda c: (-c.risk, c.template))[:k]


@dataclass
class PipelineOutput:
    t: int
    misuse: bool
    input: list[float] | None = None
    tags: list[str] = field(default_factory=list)
    substitute_inputs: list[dict] = field(default_factory=list)
    degraded: bool = False

    def to_json(self) -> dict:
        if not self.misuse:
            return {"t": self.t, "misuse": False, "input": self.input}
        out = {"t": self.t, "misuse": True, "tags": self.tags, "substitute_inputs": self.substitute_inputs}
        if self.degraded:
            out["degraded"] = True
        return out


def run_pipeline(records: Iterable[TraceRecord], profile: ReferenceProfile, kb: Sequence[HazardTemplate],
                 k: int = TOP_K, capacity: int = BUFFER_SIZE,
                 critical: CriticalCaseBuffer | None = None) -> list[PipelineOutput]:
    """Pass clean records through unchanged and replace misused ones by ranked substitute inputs."""
    buffer = RuntimeBuffer(capacity)
    outputs = []
    for rec in records:
        misuse, tags = detect_misuse(rec, profile, critical)
        if not misuse:
            outputs.append(PipelineOutput(rec.t, False, list(rec.x)))
        elif buffer.last_valid is None:
            outputs.append(PipelineOutput(rec.t, True, tags=sorted(tags), degraded=True))
        else:
            scored = [evaluate_probability(c, profile) for c in imagine_hazards(buffer, kb)]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DatactlWarning)
                top = select_high_risk(scored, k)
            outputs.append(PipelineOutput(rec.t, True, tags=sorted(tags),
                                          substitute_inputs=[c.to_json() for c in top]))
        buffer.push(rec, not misuse)
    return outputs
