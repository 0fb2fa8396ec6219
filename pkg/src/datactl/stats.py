"""Binned estimation of P(X), P(Y) and P(Y|X), and KL divergences between them.

All divergences are in nats. Raw counts are stored untouched; a Jeffreys
pseudo-count of 0.5 per cell is added only when probabilities are queried,
which keeps every KL finite for finite samples.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DataError, DatactlWarning, InsufficientDataError
from .trace import Trace

ALPHA = 0.5
N_MIN = 5
DEFAULT_CELL_CAP = 10**6
PAD_FRACTION = 0.01
NORM_TOL = 1e-9

Edges = tuple[tuple[float, ...], ...]


def _check_edges(edges: Edges, space: str) -> None:
    if not edges:
        raise DataError(f"{space}-space binning needs at least one dimension")
    for d, e in enumerate(edges):
        if len(e) < 2:
            raise DataError(f"{space}[{d}]: at least 2 edges required")
        if not all(math.isfinite(v) for v in e):
            raise DataError(f"{space}[{d}]: edges must be finite")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise DataError(f"{space}[{d}]: edges must be strictly increasing")


def _shape(edges: Edges) -> tuple[int, ...]:
    return tuple(len(e) - 1 for e in edges)


def cell_index(values: np.ndarray, edges: Edges) -> tuple[np.ndarray, np.ndarray]:
    """Flat cell index of each row of ``values`` plus an out-of-support mask.

    Values outside the outer edges (and non-finite values) are clamped to the
    nearest edge cell and flagged in the mask.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[1] != len(edges):
        raise DataError(f"expected {len(edges)} columns, got {values.shape[1]}")
    shape = _shape(edges)
    outside = np.zeros(len(values), dtype=bool)
    per_dim = []
    for d, e in enumerate(edges):
        col = values[:, d]
        arr = np.asarray(e)
        idx = np.searchsorted(arr, col, side="right") - 1
        idx = np.clip(idx, 0, shape[d] - 1)
        outside |= ~np.isfinite(col) | (col < arr[0]) | (col > arr[-1])
        per_dim.append(idx)
    flat = np.ravel_multi_index(per_dim, shape) if per_dim else np.zeros(len(values), dtype=np.intp)
    return flat.astype(np.intp), outside


@dataclass(frozen=True)
class BinningSpec:
    """Per-dimension bin edges for x-space and y-space.

    Cells are the Cartesian product of per-dimension bins, flattened in C
    order. The product of x-cells and y-cells may not exceed ``cap``.
    """

    x_edges: Edges
    y_edges: Edges
    cap: int = DEFAULT_CELL_CAP

    def __post_init__(self):
        object.__setattr__(self, "x_edges", tuple(tuple(float(v) for v in e) for e in self.x_edges))
        object.__setattr__(self, "y_edges", tuple(tuple(float(v) for v in e) for e in self.y_edges))
        _check_edges(self.x_edges, "x")
        _check_edges(self.y_edges, "y")
        total = math.prod(_shape(self.x_edges)) * math.prod(_shape(self.y_edges))
        if total > self.cap:
            raise DataError(
                f"binning has {total} cells, above the cap of {self.cap}; use fewer bins")

    @classmethod
    def uniform(cls, x_ranges: Sequence[tuple[float, float]], x_bins, y_ranges: Sequence[tuple[float, float]],
                y_bins, cap: int = DEFAULT_CELL_CAP) -> "BinningSpec":
        """Equal-width edges over explicit ranges (no padding)."""
        xb = _per_dim(x_bins, len(x_ranges))
        yb = _per_dim(y_bins, len(y_ranges))
        _check_cap(xb, yb, cap)
        xe = tuple(tuple(np.linspace(lo, hi, b + 1)) for (lo, hi), b in zip(x_ranges, xb))
        ye = tuple(tuple(np.linspace(lo, hi, b + 1)) for (lo, hi), b in zip(y_ranges, yb))
        return cls(xe, ye, cap)

    @cached_property
    def x_shape(self) -> tuple[int, ...]:
        return _shape(self.x_edges)

    @cached_property
    def y_shape(self) -> tuple[int, ...]:
        return _shape(self.y_edges)

    @property
    def n_x(self) -> int:
        return math.prod(self.x_shape)

    @property
    def n_y(self) -> int:
        return math.prod(self.y_shape)

    def x_cells(self, X) -> tuple[np.ndarray, np.ndarray]:
        return cell_index(X, self.x_edges)

    def y_cells(self, Y) -> tuple[np.ndarray, np.ndarray]:
        return cell_index(Y, self.y_edges)

    def to_json(self) -> dict:
        return {"x_edges": [list(e) for e in self.x_edges],
                "y_edges": [list(e) for e in self.y_edges], "cap": self.cap}

    @classmethod
    def from_json(cls, obj: dict) -> "BinningSpec":
        return cls(obj["x_edges"], obj["y_edges"], obj.get("cap", DEFAULT_CELL_CAP))


def _per_dim(bins, dims: int) -> tuple[int, ...]:
    if isinstance(bins, (int, np.integer)):
        out = (int(bins),) * dims
    else:
        out = tuple(int(b) for b in bins)
    if len(out) != dims:
        raise DataError(f"expected {dims} bin counts, got {len(out)}")
    return out


def _check_cap(xb, yb, cap):
    total = math.prod(xb) * math.prod(yb)
    if total > cap:
        raise DataError(f"{total} cells requested, above the cap of {cap}; use fewer bins")


def _fit_edges(col: np.ndarray, bins: int, label: str) -> tuple[float, ...]:
    if bins < 2:
        raise DataError(f"{label}: bin count must be >= 2")
    col = col[np.isfinite(col)]
    if col.size == 0:
        raise DataError(f"{label}: no finite values to fit bins on")
    lo, hi = float(col.min()), float(col.max())
    span = hi - lo
    if span == 0.0:
        warnings.warn(f"{label}: zero variance, using a single degenerate cell", DatactlWarning, stacklevel=3)
        half = 0.5 * max(abs(lo), 1.0)
        return (lo - half, lo + half)
    pad = PAD_FRACTION * span
    return tuple(np.linspace(lo - pad, hi + pad, bins + 1))


def fit_binning(data, x_bins=8, y_bins=8, cap: int = DEFAULT_CELL_CAP) -> BinningSpec:
    """Equal-width edges spanning each dimension's range padded by 1% on both sides.

    ``data`` is a :class:`Trace` or an ``(X, Y)`` pair of arrays. Bin counts
    are per dimension (an int applies to every dimension).
    """
    X, Y = _arrays(data)
    if len(X) == 0:
        raise DataError("empty trace")
    xb = _per_dim(x_bins, X.shape[1])
    yb = _per_dim(y_bins, Y.shape[1])
    _check_cap(xb, yb, cap)
    xe = tuple(_fit_edges(X[:, d], b, f"x[{d}]") for d, b in enumerate(xb))
    ye = tuple(_fit_edges(Y[:, d], b, f"y[{d}]") for d, b in enumerate(yb))
    return BinningSpec(xe, ye, cap)


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Trace):
        return data.X, data.Y
    X, Y = data
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) != len(Y):
        raise DataError("X and Y have different lengths")
    return X, Y


@dataclass(frozen=True, eq=False)
class MarginalDistribution:
    """Binned distribution over one space (x or y)."""

    edges: Edges
    counts: np.ndarray
    alpha: float = ALPHA
    out_of_support: int = 0

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    def probabilities(self, smoothed: bool = True) -> np.ndarray:
        c = self.counts.astype(float)
        if smoothed:
            c = c + self.alpha
        total = c.sum()
        if total == 0:
            raise InsufficientDataError("marginal has no mass")
        return c / total

    def to_json(self) -> dict:
        nz = np.flatnonzero(self.counts)
        return {"edges": [list(e) for e in self.edges], "alpha": self.alpha,
                "n_total": self.n_total, "counts": {int(i): int(self.counts[i]) for i in nz}}


@dataclass(frozen=True, eq=False)
class ConditionalDistribution:
    """Per-x-cell output histograms estimating P(Y|X).

    ``counts[i, j]`` is the raw number of records in x-cell ``i`` and y-cell
    ``j``. Smoothed conditionals add ``alpha`` to every y-cell of a row.
    """

    binning: BinningSpec
    counts: np.ndarray
    alpha: float = ALPHA
    out_of_support: int = 0

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    def x_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def smoothed(self) -> np.ndarray:
        c = self.counts + self.alpha
        return c / c.sum(axis=1, keepdims=True)

    def conditional(self, x_cell: int, smoothed: bool = True) -> np.ndarray:
        row = self.counts[x_cell].astype(float)
        if smoothed:
            row = row + self.alpha
        total = row.sum()
        if total == 0:
            raise InsufficientDataError(f"x-cell {x_cell} has no samples")
        return row / total

    def x_marginal(self) -> MarginalDistribution:
        return MarginalDistribution(self.binning.x_edges, self.x_counts(), self.alpha)

    def y_marginal(self) -> MarginalDistribution:
        return MarginalDistribution(self.binning.y_edges, self.counts.sum(axis=0), self.alpha)

    def to_jsonl(self) -> str:
        """Sparse line-delimited dump: a header line, then one line per supported x-cell."""
        lines = [json.dumps({"binning": self.binning.to_json(), "alpha": self.alpha,
                             "n_total": self.n_total, "out_of_support": self.out_of_support})]
        for i in np.flatnonzero(self.x_counts()):
            row = self.counts[i]
            lines.append(json.dumps({"x_cell": int(i),
                                     "counts": {int(j): int(row[j]) for j in np.flatnonzero(row)}}))
        return "\n".join(lines) + "\n"


def conditional_from_cells(binning: BinningSpec, x_cells: np.ndarray, y_cells: np.ndarray,
                           out_of_support: int = 0) -> ConditionalDistribution:
    n_y = binning.n_y
    flat = np.bincount(np.asarray(x_cells) * n_y + np.asarray(y_cells), minlength=binning.n_x * n_y)
    return ConditionalDistribution(binning, flat.reshape(binning.n_x, n_y), ALPHA, int(out_of_support))


def estimate_conditional(data, binning: BinningSpec) -> ConditionalDistribution:
    """Count every record of ``data`` (a Trace or an ``(X, Y)`` pair) into its cell.

    Out-of-range samples are clamped into edge cells and tallied in
    ``out_of_support``.
    """
    X, Y = _arrays(data)
    if len(X) == 0:
        raise DataError("empty slice")
    xc, xo = binning.x_cells(X)
    yc, yo = binning.y_cells(Y)
    return conditional_from_cells(binning, xc, yc, int(np.count_nonzero(xo | yo)))


def estimate_marginal(values, edges: Edges) -> MarginalDistribution:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("empty slice")
    cells, outside = cell_index(values, edges)
    counts = np.bincount(cells, minlength=math.prod(_shape(edges)))
    return MarginalDistribution(tuple(edges), counts, ALPHA, int(np.count_nonzero(outside)))


def pooled_x_marginal(*dists: ConditionalDistribution) -> MarginalDistribution:
    counts = sum(d.x_counts() for d in dists)
    return MarginalDistribution(dists[0].binning.x_edges, counts, ALPHA)


def kl_discrete(p, q) -> float:
    """KL(p || q) in nats with 0*ln(0/q) = 0; ``math.inf`` if p has mass where q has none."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DataError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise DataError(f"{name} has negative or non-finite entries")
        if abs(v.sum() - 1.0) > NORM_TOL:
            raise DataError(f"{name} is not normalized (sums to {v.sum():.12g})")
    support = p > 0
    if np.any(support & (q == 0)):
        return math.inf
    return float(max(np.sum(p[support] * np.log(p[support] / q[support])), 0.0))


@dataclass(frozen=True)
class Divergence:
    """A conditional divergence and the share of input mass it could not use."""

    value: float
    excluded_mass: float
    cells_used: int

    def __float__(self) -> float:
        return self.value

    def to_json(self) -> dict:
        return {"value": self.value, "excluded_mass": self.excluded_mass, "cells_used": self.cells_used}


def _row_kl(ps: np.ndarray, qs: np.ndarray) -> np.ndarray:
    return np.sum(ps * np.log(ps / qs), axis=1)


def _included(p: ConditionalDistribution, q: ConditionalDistribution, weights, n_min: int):
    if p.binning != q.binning:
        raise DataError("binning mismatch between distributions")
    if weights is None:
        weights = pooled_x_marginal(p, q)
    w = np.asarray(weights.counts, dtype=float)
    if w.shape != (p.binning.n_x,):
        raise DataError("weights do not cover the x-cells of the binning")
    mask = (p.x_counts() >= n_min) & (q.x_counts() >= n_min) & (w > 0)
    total = w.sum()
    used = w[mask].sum()
    if not mask.any() or used <= 0:
        raise InsufficientDataError("insufficient overlap")
    return mask, w, used, total


def conditional_kl(p: ConditionalDistribution, q: ConditionalDistribution,
                   weights: MarginalDistribution | None = None, n_min: int = N_MIN) -> Divergence:
    """Input-weighted mean of per-x-cell KL(p(.|x) || q(.|x)) over smoothed conditionals.

    Weights default to the pooled empirical x-marginal of ``p`` and ``q``.
    Only x-cells holding at least ``n_min`` raw samples in both operands
    contribute; weights are renormalized over those cells and the excluded
    share is reported.
    """
    mask, w, used, total = _included(p, q, weights, n_min)
    per_cell = _row_kl(p.smoothed()[mask], q.smoothed()[mask])
    value = float(np.dot(w[mask], per_cell) / used)
    return Divergence(max(value, 0.0), float(1.0 - used / total), int(mask.sum()))


def symmetrized_kl(p: ConditionalDistribution, q: ConditionalDistribution,
                   weights: MarginalDistribution | None = None, n_min: int = N_MIN) -> Divergence:
    if weights is None:
        weights = pooled_x_marginal(p, q)
    a = conditional_kl(p, q, weights, n_min)
    b = conditional_kl(q, p, weights, n_min)
    return Divergence(0.5 * (a.value + b.value), a.excluded_mass, a.cells_used)
