"""Static / non-stationary / dynamic classification of black-box systems.

Passive classification works on a recorded trace: temporal segments are
compared first (does P(Y|X) move at all?), then a memory test asks whether
outputs within an input cell depend on the preceding inputs. Active
classification drives a resettable system with probe sequences.
"""

from __future__ import annotations

import enum
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DatactlWarning, InsufficientDataError
from .stats import (
    ALPHA,
    BinningSpec,
    conditional_from_cells,
    fit_binning,
    symmetrized_kl,
)
from .trace import Trace, TraceRecord

KAPPA = 0.05
HISTORY = 3
MIN_RECORDS_PER_SEGMENT = 50
MARGINAL_BAND = 0.10
MEMORY_MIN_PARTITION = 30
MEMORY_PERMUTATIONS = 8


class SystemClassLabel(str, enum.Enum):
    STATIC = "static"
    NONSTATIONARY = "nonstationary"
    DYNAMIC = "dynamic"


@dataclass
class SystemClass:
    label: SystemClassLabel
    confidence: float
    evidence: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_json(self) -> dict:
        return {"class": self.label.value, "confidence": self.confidence,
                "evidence": self.evidence, "warnings": list(self.warnings)}


@dataclass(frozen=True)
class ProbeProtocol:
    """How :func:`classify_active` drives a system.

    Prefix pair ``j`` feeds ``prefix_length`` copies of ``+level*(j+1)``
    versus ``-level*(j+1)`` before the common terminal input (zeros unless
    given), each repeated ``repetitions`` times from a reset.
    """

    n_pairs: int = 2
    prefix_length: int = 10
    repetitions: int = 1000
    level: float = 1.0
    terminal: tuple[float, ...] | None = None
    contexts: tuple[float, ...] = ()
    time_offsets: tuple[int, ...] = (1000,)
    probe_grid: tuple[float, ...] = (-2.0, -1.0, 0.0, 1.0, 2.0)
    y_bins: int = 4
    passive_length: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if min(self.n_pairs, self.prefix_length, self.repetitions) < 1:
            raise DataError("probe counts must be >= 1")


def _squash(stat: float, kappa: float) -> float:
    if not math.isfinite(stat):
        return 1.0
    return float(math.tanh(abs(stat - kappa) / kappa))


def _history_codes(X: np.ndarray, k: int) -> np.ndarray:
    """Signature of the previous ``k`` inputs, each dimension split at its median.

    Entry ``i`` encodes inputs ``i-k .. i-1``; the first ``k`` entries are -1.
    """
    n, dim = X.shape
    above = (X > np.median(X, axis=0)).astype(np.int64)
    bits = above @ (1 << np.arange(dim))
    codes = np.full(n, -1, dtype=np.int64)
    if n <= k:
        return codes
    acc = np.zeros(n - k, dtype=np.int64)
    for lag in range(1, k + 1):
        acc = acc * (1 << dim) + bits[k - lag: n - lag]
    codes[k:] = acc
    return codes


def _mi_stat(yc: np.ndarray, parts: np.ndarray, n_y: int) -> float:
    """Partition-weighted symmetrized KL of each partition's output histogram vs the pooled one."""
    labels, inv = np.unique(parts, return_inverse=True)
    table = np.zeros((len(labels), n_y))
    np.add.at(table, (inv, yc), 1)
    sizes = table.sum(axis=1)
    pooled = table.sum(axis=0) + ALPHA
    pooled /= pooled.sum()
    ph = (table + ALPHA) / (sizes[:, None] + ALPHA * n_y)
    fwd = np.sum(ph * np.log(ph / pooled), axis=1)
    bwd = np.sum(pooled * np.log(pooled / ph), axis=1)
    return float(np.dot(sizes / sizes.sum(), 0.5 * (fwd + bwd)))


def memory_statistic(xc: np.ndarray, yc: np.ndarray, codes: np.ndarray, n_y: int,
                     min_partition: int = MEMORY_MIN_PARTITION,
                     permutations: int = MEMORY_PERMUTATIONS, seed: int = 0) -> tuple[float | None, dict]:
    """Largest per-x-cell dependence of outputs on the input history.

    Within each x-cell, records are split by history signature; partitions
    smaller than ``min_partition`` are dropped. The cell statistic is the
    partition-weighted symmetrized KL against the cell's pooled output
    histogram, minus its mean under random relabelling of the partitions
    (removes the finite-sample floor). Returns ``None`` when no cell has two
    usable partitions.
    """
    rng = np.random.default_rng(seed)
    per_cell = {}
    for cell in np.unique(xc):
        sel = (xc == cell) & (codes >= 0)
        if not sel.any():
            continue
        cell_codes = codes[sel]
        labels, counts = np.unique(cell_codes, return_counts=True)
        keep_labels = labels[counts >= min_partition]
        if len(keep_labels) < 2:
            continue
        keep = np.isin(cell_codes, keep_labels)
        y_cell, parts = yc[sel][keep], cell_codes[keep]
        raw = _mi_stat(y_cell, parts, n_y)
        null = np.mean([_mi_stat(y_cell, rng.permutation(parts), n_y) for _ in range(permutations)]) \
            if permutations else 0.0
        per_cell[int(cell)] = raw - float(null)
    if not per_cell:
        return None, per_cell
    return max(per_cell.values()), per_cell


def classify_passive(trace: Trace, segments: int = 4, kappa: float = KAPPA,
                     binning: BinningSpec | None = None, x_bins=6, y_bins=6,
                     history: int = HISTORY) -> SystemClass:
    """Classify a system from one recorded trace.

    Static when every pair of temporal segments has symmetrized conditional
    KL at most ``kappa``. Otherwise Dynamic if the memory test exceeds
    ``kappa`` in some x-cell, else NonStationary. When a non-static trace has
    both statistics within 10% of ``kappa`` the weaker claim (NonStationary)
    is reported with low confidence.
    """
    if segments < 2:
        raise DataError("segments must be >= 2")
    if kappa <= 0:
        raise DataError("kappa must be positive")
    n = len(trace)
    if n < segments * MIN_RECORDS_PER_SEGMENT:
        raise InsufficientDataError(
            f"trace has {n} records; need at least {segments * MIN_RECORDS_PER_SEGMENT} for {segments} segments")
    notes: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DatactlWarning)
        if binning is None:
            binning = fit_binning(trace, x_bins, y_bins)
    notes.extend(str(w.message) for w in caught)
    xc, _ = binning.x_cells(trace.X)
    yc, _ = binning.y_cells(trace.Y)

    bounds = np.linspace(0, n, segments + 1).astype(int)
    seg_dists = [conditional_from_cells(binning, xc[a:b], yc[a:b]) for a, b in zip(bounds, bounds[1:])]
    pairs = []
    for i, j in itertools.combinations(range(segments), 2):
        try:
            d = symmetrized_kl(seg_dists[i], seg_dists[j])
        except InsufficientDataError:
            pairs.append({"pair": [i, j], "value": None})
            continue
        pairs.append({"pair": [i, j], "value": d.value, "excluded_mass": d.excluded_mass})
    values = [p["value"] for p in pairs if p["value"] is not None]
    if values:
        seg_stat = max(values)
    else:
        seg_stat = math.inf
        notes.append("segments share no input cells; segment test inconclusive")

    codes = _history_codes(trace.X, history)
    mem_stat, per_cell = memory_statistic(xc, yc, codes, binning.n_y)
    evidence = {"segment_pairs": pairs, "segment_stat": _num(seg_stat), "memory_stat": mem_stat,
                "memory_cells": per_cell, "kappa": kappa}

    def marginal(s):
        return s is not None and math.isfinite(s) and abs(s - kappa) <= MARGINAL_BAND * kappa

    if seg_stat > kappa and marginal(seg_stat) and marginal(mem_stat):
        gap = max(abs(seg_stat - kappa), abs(mem_stat - kappa))
        return SystemClass(SystemClassLabel.NONSTATIONARY, min(0.1, _squash(kappa + gap, kappa)), evidence,
                           notes + ["segment and memory tests both marginal"])
    if seg_stat <= kappa:
        return SystemClass(SystemClassLabel.STATIC, _squash(seg_stat, kappa), evidence, notes)
    if mem_stat is None:
        warnings.warn("memory test inconclusive", DatactlWarning, stacklevel=2)
        notes.append("memory test inconclusive")
        return SystemClass(SystemClassLabel.NONSTATIONARY, 0.0, evidence, notes)
    if mem_stat > kappa:
        return SystemClass(SystemClassLabel.DYNAMIC, _squash(mem_stat, kappa), evidence, notes)
    conf = min(_squash(seg_stat, kappa), _squash(mem_stat, kappa))
    return SystemClass(SystemClassLabel.NONSTATIONARY, conf, evidence, notes)


def _num(v):
    return None if v is None or not math.isfinite(v) else v


def _one_cell_kl(a: np.ndarray, b: np.ndarray, y_bins: int) -> float:
    """Symmetrized KL between two output samples, binned jointly with a single input cell."""
    ys = np.concatenate([a, b])
    lo, hi = float(ys.min()), float(ys.max())
    if hi == lo:
        return 0.0
    pad = 0.01 * (hi - lo)
    binning = BinningSpec(((-1.0, 1.0),), (tuple(np.linspace(lo - pad, hi + pad, y_bins + 1)),))
    ca = conditional_from_cells(binning, np.zeros(len(a), dtype=np.intp), binning.y_cells(a)[0])
    cb = conditional_from_cells(binning, np.zeros(len(b), dtype=np.intp), binning.y_cells(b)[0])
    return symmetrized_kl(ca, cb).value


def _grid_kl(grid: np.ndarray, a: np.ndarray, b: np.ndarray, y_bins: int) -> float:
    """Symmetrized conditional KL between two runs over the same probe grid (one x-cell per grid point)."""
    pts = np.unique(grid)
    mids = (pts[1:] + pts[:-1]) / 2 if len(pts) > 1 else np.array([])
    edges = np.concatenate([[pts[0] - 1.0], mids, [pts[-1] + 1.0]])
    ys = np.concatenate([a, b])
    lo, hi = float(ys.min()), float(ys.max())
    if hi == lo:
        return 0.0
    pad = 0.01 * (hi - lo)
    binning = BinningSpec((tuple(edges),), (tuple(np.linspace(lo - pad, hi + pad, y_bins + 1)),))
    xc, _ = binning.x_cells(grid)
    ca = conditional_from_cells(binning, xc, binning.y_cells(a)[0])
    cb = conditional_from_cells(binning, xc, binning.y_cells(b)[0])
    return symmetrized_kl(ca, cb).value


def _run_prefix(system, prefix, terminal, reps) -> np.ndarray:
    out = []
    for _ in range(reps):
        system.reset()
        for x in prefix:
            system.step(x)
        out.append(np.asarray(system.step(terminal), dtype=float).reshape(-1))
    return np.array(out)


def _run_grid(system, grid_inputs) -> np.ndarray:
    return np.array([np.asarray(system.step(x), dtype=float).reshape(-1) for x in grid_inputs])


def classify_active(system, protocol: ProbeProtocol = ProbeProtocol(), kappa: float = KAPPA) -> SystemClass:
    """Classify a resettable system (``reset()``, ``step(x) -> y``) by probing it.

    Dynamic if two different input prefixes followed by the same terminal
    input give different terminal-output distributions. Otherwise
    NonStationary if the same probe inputs give different outputs under
    different contexts (``set_context``) or at different times; else Static.
    Probes run sequentially on the single system handle.
    """
    dim = getattr(system, "x_dim", None) or (len(protocol.terminal) if protocol.terminal else 1)
    terminal = np.asarray(protocol.terminal if protocol.terminal is not None else np.zeros(dim), dtype=float)
    try:
        system.reset()
    except Exception as exc:  # noqa: BLE001 - any refusal triggers the passive fallback
        msg = f"system refused reset ({exc.__class__.__name__}); falling back to passive classification"
        warnings.warn(msg, DatactlWarning, stacklevel=2)
        rng = np.random.default_rng(protocol.seed)
        xs = rng.standard_normal((protocol.passive_length, dim))
        records = [TraceRecord(t, tuple(x), tuple(np.asarray(system.step(x), dtype=float).reshape(-1)))
                   for t, x in enumerate(xs)]
        result = classify_passive(Trace.from_records(records, source="active-fallback"), kappa=kappa)
        result.warnings.insert(0, msg)
        return result

    evidence: dict = {"prefix_pairs": [], "context_pairs": [], "time_offsets": [], "kappa": kappa}
    for j in range(protocol.n_pairs):
        lvl = protocol.level * (j + 1)
        hi = _run_prefix(system, [np.full(dim, lvl)] * protocol.prefix_length, terminal, protocol.repetitions)
        lo = _run_prefix(system, [np.full(dim, -lvl)] * protocol.prefix_length, terminal, protocol.repetitions)
        stat = float(np.mean([_one_cell_kl(hi[:, k], lo[:, k], protocol.y_bins) for k in range(hi.shape[1])]))
        evidence["prefix_pairs"].append({"level": lvl, "value": stat})
    prefix_stat = max(p["value"] for p in evidence["prefix_pairs"])
    if prefix_stat > kappa:
        return SystemClass(SystemClassLabel.DYNAMIC, _squash(prefix_stat, kappa), evidence)

    per_point = max(1, protocol.repetitions // len(protocol.probe_grid))
    grid = np.repeat(np.asarray(protocol.probe_grid, dtype=float), per_point)
    grid_inputs = [np.full(dim, g) for g in grid]
    stats = []
    if protocol.contexts and hasattr(system, "set_context"):
        runs = []
        for c in protocol.contexts:
            system.set_context(c)
            system.reset()
            runs.append(_run_grid(system, grid_inputs))
        for (i, ra), (j, rb) in itertools.combinations(enumerate(runs), 2):
            v = float(np.mean([_grid_kl(grid, ra[:, k], rb[:, k], protocol.y_bins) for k in range(ra.shape[1])]))
            evidence["context_pairs"].append({"contexts": [protocol.contexts[i], protocol.contexts[j]], "value": v})
            stats.append(v)
    for offset in protocol.time_offsets:
        system.reset()
        first = _run_grid(system, grid_inputs)
        for _ in range(offset):
            system.step(terminal)
        later = _run_grid(system, grid_inputs)
        v = float(np.mean([_grid_kl(grid, first[:, k], later[:, k], protocol.y_bins) for k in range(first.shape[1])]))
        evidence["time_offsets"].append({"offset": offset, "value": v})
        stats.append(v)
    change_stat = max(stats) if stats else 0.0
    if change_stat > kappa:
        return SystemClass(SystemClassLabel.NONSTATIONARY, _squash(change_stat, kappa), evidence)
    decisive = max(prefix_stat, change_stat)
    return SystemClass(SystemClassLabel.STATIC, _squash(decisive, kappa), evidence)
