"""Runtime monitoring against a development-time reference profile.

Records are consumed in order and grouped into consecutive non-overlapping
windows. Each completed window is compared with the reference on three
statistics (input marginal, output marginal, conditional) and labeled with
one shift type; individual records get out-of-distribution tags.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, DatactlWarning, InsufficientDataError
from .stats import (
    BinningSpec,
    ConditionalDistribution,
    MarginalDistribution,
    conditional_from_cells,
    conditional_kl,
    estimate_conditional,
    fit_binning,
    kl_discrete,
)
from .trace import Trace, TraceRecord

MIN_REFERENCE = 1000
FLOOR_PERCENTILE = 1.0
REF_MIN = 50
THETA = 0.1

DATA_CHARACTERISTICS = "data_characteristics"
OUTLIER = "outlier"
UNKNOWN_CLASS = "unknown_class"

LABELS = ("none", "covariate", "target", "concept", "mixed")


@dataclass(frozen=True, eq=False)
class ReferenceProfile:
    """Binned development-time distributions shared by every runtime comparison."""

    binning: BinningSpec
    p_x: MarginalDistribution
    p_y: MarginalDistribution
    conditional: ConditionalDistribution
    floor: float
    provenance: str = ""
    x_ranges: tuple[tuple[float, float], ...] | None = None

    @property
    def density(self) -> np.ndarray:
        """Smoothed reference mass of each x-cell."""
        return self.p_x.probabilities()

    def to_json(self) -> dict:
        return {"provenance": self.provenance, "n": self.conditional.n_total, "floor": self.floor,
                "binning": self.binning.to_json(),
                "x_ranges": [list(r) for r in self.x_ranges] if self.x_ranges else None}


def build_reference(dev_trace: Trace, binning: BinningSpec | None = None, provenance: str | None = None,
                    x_ranges: Sequence[tuple[float, float]] | None = None,
                    floor_percentile: float = FLOOR_PERCENTILE) -> ReferenceProfile:
    """Estimate the reference distributions from at least 1000 development records.

    The outlier floor is the ``floor_percentile`` percentile of the reference
    x-cell mass seen by each development record. ``x_ranges`` optionally
    declares the valid range of every input dimension.
    """
    if len(dev_trace) < MIN_REFERENCE:
        raise DataError(f"reference trace has {len(dev_trace)} records, need at least {MIN_REFERENCE}")
    if binning is None:
        binning = fit_binning(dev_trace)
    if len(binning.x_edges) != dev_trace.meta.x_dim or len(binning.y_edges) != dev_trace.meta.y_dim:
        raise DataError("binning does not match the trace dimensions")
    cond = estimate_conditional(dev_trace, binning)
    p_x, p_y = cond.x_marginal(), cond.y_marginal()
    xc, _ = binning.x_cells(dev_trace.X)
    floor = float(np.percentile(p_x.probabilities()[xc], floor_percentile))
    if x_ranges is not None:
        x_ranges = tuple((float(lo), float(hi)) for lo, hi in x_ranges)
        if len(x_ranges) != dev_trace.meta.x_dim:
            raise DataError("x_ranges must give one (low, high) pair per input dimension")
    return ReferenceProfile(binning, p_x, p_y, cond, floor,
                            dev_trace.meta.source if provenance is None else provenance, x_ranges)


def classify_ood_record(record: TraceRecord, profile: ReferenceProfile, floor: float | None = None) -> set[str]:
    """Record-level out-of-distribution tags; empty for an unremarkable record."""
    tags: set[str] = set()
    x = np.asarray(record.x, dtype=float)
    if len(x) != len(profile.binning.x_edges):
        return {DATA_CHARACTERISTICS}
    if not np.all(np.isfinite(x)) or not all(math.isfinite(v) for v in record.y):
        tags.add(DATA_CHARACTERISTICS)
        return tags
    if profile.x_ranges is not None and any(not lo <= v <= hi for v, (lo, hi) in zip(x, profile.x_ranges)):
        tags.add(DATA_CHARACTERISTICS)
    cell, outside = profile.binning.x_cells(x[None, :])
    if outside[0]:
        tags.add(UNKNOWN_CLASS)
    elif profile.density[cell[0]] < (profile.floor if floor is None else floor):
        tags.add(OUTLIER)
    return tags


@dataclass
class ShiftReport:
    window: int
    t_start: int
    t_end: int
    input_kl: float
    output_kl: float
    conditional_kl: float | None
    label: str
    flagged: list[int] = field(default_factory=list)
    tags: dict[str, int] = field(default_factory=dict)
    excluded_mass: float | None = None

    def to_json(self) -> dict:
        return {"window": self.window, "t_start": self.t_start, "t_end": self.t_end,
                "input_kl": self.input_kl, "output_kl": self.output_kl,
                "conditional_kl": self.conditional_kl, "label": self.label,
                "flagged": self.flagged, "tags": self.tags, "excluded_mass": self.excluded_mass}


def shift_label(input_kl: float, output_kl: float, cond_kl: float | None,
                theta_x: float = THETA, theta_y: float = THETA, theta_c: float = THETA) -> str:
    """Decision matrix; a conditional change dominates the marginal statistics."""
    in_x = input_kl > theta_x
    if cond_kl is not None and cond_kl > theta_c:
        return "mixed" if in_x else "concept"
    if in_x:
        return "covariate"
    if output_kl > theta_y:
        return "target"
    return "none"


def _window_report(k: int, start: int, recs: list[TraceRecord], profile: ReferenceProfile,
                   thetas: tuple[float, float, float]) -> ShiftReport:
    b = profile.binning
    X = np.array([r.x for r in recs], dtype=float)
    Y = np.array([r.y for r in recs], dtype=float)
    xc, xo = b.x_cells(X)
    yc, yo = b.y_cells(Y)
    win_x = MarginalDistribution(b.x_edges, np.bincount(xc, minlength=b.n_x))
    win_y = MarginalDistribution(b.y_edges, np.bincount(yc, minlength=b.n_y))
    input_kl = kl_discrete(win_x.probabilities(), profile.p_x.probabilities())
    output_kl = kl_discrete(win_y.probabilities(), profile.p_y.probabilities())
    keep = ~(xo | yo)
    cond_kl = excluded = None
    if keep.any():
        win = conditional_from_cells(b, xc[keep], yc[keep])
        try:
            weights = win.x_marginal()
            weights = MarginalDistribution(weights.edges, np.where(profile.p_x.counts >= REF_MIN, weights.counts, 0))
            d = conditional_kl(win, profile.conditional, weights)
            cond_kl, excluded = d.value, d.excluded_mass
        except InsufficientDataError:
            pass
    flagged, tags = [], {}
    for i, r in enumerate(recs):
        found = classify_ood_record(r, profile)
        if found:
            flagged.append(start + i)
            for tag in found:
                tags[tag] = tags.get(tag, 0) + 1
    label = shift_label(input_kl, output_kl, cond_kl, *thetas)
    return ShiftReport(k, recs[0].t, recs[-1].t, input_kl, output_kl, cond_kl, label,
                       flagged, dict(sorted(tags.items())), excluded)


def iter_reports(records: Iterable[TraceRecord], profile: ReferenceProfile, width: int = 500,
                 theta_x: float = THETA, theta_y: float = THETA, theta_c: float = THETA) -> Iterator[ShiftReport]:
    """Yield one report per completed window of ``width`` records as records arrive."""
    if width < 1:
        raise DataError("window width must be >= 1")
    dims = (len(profile.binning.x_edges), len(profile.binning.y_edges))
    buf: list[TraceRecord] = []
    k = 0
    for i, rec in enumerate(records):
        if (len(rec.x), len(rec.y)) != dims:
            raise DataError(f"record {i}: dimensions {(len(rec.x), len(rec.y))} do not match reference {dims}")
        buf.append(rec)
        if len(buf) == width:
            yield _window_report(k, i + 1 - width, buf, profile, (theta_x, theta_y, theta_c))
            buf = []
            k += 1


def monitor_stream(records: Iterable[TraceRecord], profile: ReferenceProfile, width: int = 500,
                   theta_x: float = THETA, theta_y: float = THETA, theta_c: float = THETA) -> list[ShiftReport]:
    reports = list(iter_reports(records, profile, width, theta_x, theta_y, theta_c))
    if not reports:
        warnings.warn(f"no window of {width} records completed", DatactlWarning, stacklevel=2)
    return reports
