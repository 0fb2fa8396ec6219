"""Property checkers over recorded traces: circumstance robustness,
circumstance sensitivity and dynamics stability.

Each checker returns a :class:`Verdict` whose evidence lists every compared
pair or window with its statistic, the bound it was held to and whether the
bound was violated.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DataError, InsufficientDataError
from .stats import (
    BinningSpec,
    ConditionalDistribution,
    conditional_from_cells,
    conditional_kl,
    fit_binning,
    pooled_x_marginal,
    symmetrized_kl,
)
from .trace import CIRCUMSTANCE_CHANGE, ModelDescriptor, Trace

KAPPA_ROB = 0.05
ETA_STAB = 0.02
GRACE = 2
QUANTILE_GROUPS = 4
DEFAULT_BINS = 8


@dataclass
class Evidence:
    id: str
    statistic: float | None
    bound: object
    violated: bool
    info: dict = field(default_factory=dict)
    key: tuple = field(default=(), repr=False, compare=False)

    def to_json(self) -> dict:
        return {"id": self.id, "statistic": self.statistic, "bound": self.bound,
                "violated": self.violated, **self.info}


@dataclass
class Verdict:
    """Outcome of a property check.

    ``passed`` is derived: a determinate verdict passes exactly when no
    evidence entry is violated. Indeterminate verdicts never pass.
    """

    check: str
    evidence: list[Evidence]
    summary: str = ""
    indeterminate: bool = False
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.evidence.sort(key=lambda e: e.key or (e.id,))

    @property
    def violations(self) -> list[Evidence]:
        return [e for e in self.evidence if e.violated]

    @property
    def passed(self) -> bool:
        return not self.indeterminate and not self.violations

    @property
    def status(self) -> str:
        if self.indeterminate:
            return "indeterminate"
        return "pass" if self.passed else "fail"

    @property
    def exit_code(self) -> int:
        return {"pass": 0, "fail": 1, "indeterminate": 2}[self.status]

    def to_json(self) -> dict:
        return {"check": self.check, "status": self.status, "pass": self.passed,
                "summary": self.summary, "evidence": [e.to_json() for e in self.evidence],
                "details": self.details}


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobustnessSpec:
    """Circumstances the relationship must be invariant to, their bounds and the KL tolerance."""

    factors: tuple[str, ...]
    bounds: Mapping[str, tuple[float, float]]
    kappa_rob: float = KAPPA_ROB
    groups: int = QUANTILE_GROUPS

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "bounds", {k: (float(v[0]), float(v[1])) for k, v in self.bounds.items()})
        if not self.factors:
            raise DataError("robustness spec needs at least one factor")
        for f in self.factors:
            if f not in self.bounds:
                raise DataError(f"no bounds declared for factor {f!r}")
            lo, hi = self.bounds[f]
            if not lo < hi:
                raise DataError(f"factor {f!r}: lower bound must be below upper bound")
        if self.kappa_rob <= 0:
            raise DataError("kappa_rob must be positive")
        if self.groups < 2:
            raise DataError("groups must be >= 2")

    @classmethod
    def from_json(cls, obj: Mapping) -> "RobustnessSpec":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise DataError(f"invalid robustness spec: {exc}") from None


@dataclass(frozen=True)
class SensitivityEntry:
    tau: float
    alpha: float
    epsilon: float

    def __post_init__(self):
        if self.tau <= 0 or self.alpha <= 0:
            raise DataError("tau and alpha must be positive")
        if not 0 <= self.epsilon < self.alpha:
            raise DataError("epsilon must satisfy 0 <= epsilon < alpha")

    def band(self, delta: float) -> tuple[float, float]:
        r = delta / self.tau
        return ((self.alpha - self.epsilon) * r, (self.alpha + self.epsilon) * r)


@dataclass(frozen=True)
class SensitivitySpec:
    """Required response of P(Y|X) to each factor: threshold, ratio and ratio tolerance."""

    factors: Mapping[str, SensitivityEntry]
    groups: int = QUANTILE_GROUPS

    def __post_init__(self):
        fixed = {k: v if isinstance(v, SensitivityEntry) else SensitivityEntry(**v) for k, v in self.factors.items()}
        object.__setattr__(self, "factors", fixed)
        if not fixed:
            raise DataError("sensitivity spec needs at least one factor")
        if self.groups < 2:
            raise DataError("groups must be >= 2")

    @classmethod
    def from_json(cls, obj: Mapping) -> "SensitivitySpec":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise DataError(f"invalid sensitivity spec: {exc}") from None


@dataclass(frozen=True)
class StabilityParams:
    width: int = 500
    stride: int = 250
    eta: float = ETA_STAB
    grace: int = GRACE

    def __post_init__(self):
        if self.width < 50:
            raise DataError("window width must be >= 50")
        if self.stride < 1:
            raise DataError("stride must be >= 1")
        if self.grace < 0 or self.eta < 0:
            raise DataError("grace and eta must be >= 0")


# ---------------------------------------------------------------------------
# Circumstance grouping
# ---------------------------------------------------------------------------

@dataclass
class FactorGroup:
    label: str
    value: float
    lo: float
    hi: float
    mask: np.ndarray


def factor_groups(values: np.ndarray, n_groups: int, bounds: tuple[float, float] | None = None):
    """Group records by factor instantiation.

    Unspecified (NaN) values are dropped, as are values outside the open
    interval ``bounds``. Factors with at most ``n_groups`` distinct values
    get one group per value; otherwise quantile groups of equal size.
    Returns ``(groups, n_out_of_bounds, n_unspecified)``.
    """
    specified = np.isfinite(values)
    usable = specified.copy()
    n_oob = 0
    if bounds is not None:
        lo, hi = bounds
        inside = specified & (values > lo) & (values < hi)
        n_oob = int(np.count_nonzero(specified & ~inside))
        usable = inside
    vals = values[usable]
    groups: list[FactorGroup] = []
    distinct = np.unique(vals)
    if len(distinct) <= n_groups:
        for v in distinct:
            groups.append(FactorGroup(f"{v:g}", float(v), float(v), float(v), usable & (values == v)))
    else:
        inner = np.quantile(vals, np.linspace(0, 1, n_groups + 1)[1:-1])
        gidx = np.full(len(values), -1)
        gidx[usable] = np.searchsorted(inner, vals, side="right")
        for g in range(n_groups):
            mask = gidx == g
            if not mask.any():
                continue
            member = values[mask]
            groups.append(FactorGroup(f"q{g}", float(member.mean()), float(member.min()), float(member.max()), mask))
    return groups, n_oob, int(np.count_nonzero(~specified))


def _cells(trace: Trace, binning: BinningSpec | None, x_bins=DEFAULT_BINS, y_bins=DEFAULT_BINS):
    if binning is None:
        binning = fit_binning(trace, x_bins, y_bins)
    xc, _ = binning.x_cells(trace.X)
    yc, _ = binning.y_cells(trace.Y)
    return binning, xc, yc


def _annotate(details: dict, model: ModelDescriptor | None) -> dict:
    if model is not None:
        details["model"] = {"name": model.name, "environment": model.environment,
                            "parameters": model.parameters, "loss": model.loss}
    return details


# ---------------------------------------------------------------------------
# Checkers
# ---------------------------------------------------------------------------

def check_robustness(trace: Trace, spec: RobustnessSpec, binning: BinningSpec | None = None,
                     model: ModelDescriptor | None = None) -> Verdict:
    """PASS iff every pair of in-bounds circumstance groups has symmetrized conditional KL <= kappa_rob."""
    binning, xc, yc = _cells(trace, binning)
    evidence: list[Evidence] = []
    coverage = {}
    comparable = 0
    for fi, factor in enumerate(spec.factors):
        if not trace.has_circumstance(factor):
            raise DataError(f"factor {factor!r} absent from trace")
        groups, n_oob, n_unspec = factor_groups(trace.circ_column(factor), spec.groups, spec.bounds[factor])
        if len(groups) < 2:
            raise InsufficientDataError(f"insufficient circumstance coverage for factor {factor!r}")
        coverage[factor] = {"groups": [{"label": g.label, "value": g.value, "range": [g.lo, g.hi],
                                        "n": int(g.mask.sum())} for g in groups],
                            "out_of_bounds": n_oob, "unspecified": n_unspec}
        dists = [conditional_from_cells(binning, xc[g.mask], yc[g.mask]) for g in groups]
        for (i, a), (j, b) in itertools.combinations(enumerate(groups), 2):
            pid = f"{factor}:{a.label}|{b.label}"
            key = (fi, i, j)
            try:
                d = symmetrized_kl(dists[i], dists[j])
            except InsufficientDataError:
                evidence.append(Evidence(pid, None, spec.kappa_rob, False, {"note": "no overlapping input cells"}, key))
                continue
            comparable += 1
            evidence.append(Evidence(pid, d.value, spec.kappa_rob, d.value > spec.kappa_rob,
                                     {"excluded_mass": d.excluded_mass}, key))
    indeterminate = comparable == 0
    verdict = Verdict("robustness", evidence, indeterminate=indeterminate,
                      details=_annotate({"coverage": coverage, "kappa_rob": spec.kappa_rob}, model))
    bad = verdict.violations
    if indeterminate:
        verdict.summary = "robustness indeterminate: no group pair shares input cells"
    elif bad:
        verdict.summary = (f"robustness FAIL: {len(bad)} of {comparable} pairs exceed "
                           f"{spec.kappa_rob} nats (worst {max(bad, key=lambda e: e.statistic).id})")
    else:
        verdict.summary = f"robustness PASS: all {comparable} pairs within {spec.kappa_rob} nats"
    return verdict


def check_sensitivity(trace: Trace, spec: SensitivitySpec, binning: BinningSpec | None = None,
                      model: ModelDescriptor | None = None) -> Verdict:
    """PASS iff every ordered pair of instantiations further apart than tau has
    (alpha - eps) * delta/tau < KL(P_m || P_n) < (alpha + eps) * delta/tau.

    Pairs with delta <= tau are reported as sub-threshold and never violate.
    """
    binning, xc, yc = _cells(trace, binning)
    evidence: list[Evidence] = []
    qualifying = 0
    skipped = 0
    for fi, (factor, entry) in enumerate(spec.factors.items()):
        if not trace.has_circumstance(factor):
            raise DataError(f"factor {factor!r} absent from trace")
        groups, _, _ = factor_groups(trace.circ_column(factor), spec.groups)
        if len(groups) < 2:
            raise InsufficientDataError(f"insufficient circumstance coverage for factor {factor!r}")
        dists = [conditional_from_cells(binning, xc[g.mask], yc[g.mask]) for g in groups]
        for (m, gm), (n, gn) in itertools.permutations(enumerate(groups), 2):
            delta = abs(gm.value - gn.value)
            pid = f"{factor}:{gm.label}->{gn.label}"
            key = (fi, m, n)
            lo, hi = entry.band(delta)
            info = {"delta": delta, "lambda_m": gm.value, "lambda_n": gn.value}
            if delta <= entry.tau:
                skipped += 1
                evidence.append(Evidence(pid, None, None, False, {**info, "status": "sub-threshold"}, key))
                continue
            qualifying += 1
            try:
                d = conditional_kl(dists[m], dists[n], pooled_x_marginal(dists[m], dists[n]))
            except InsufficientDataError:
                evidence.append(Evidence(pid, None, [lo, hi], True,
                                         {**info, "status": "no overlapping input cells"}, key))
                continue
            inside = lo < d.value < hi
            evidence.append(Evidence(pid, d.value, [lo, hi], not inside,
                                     {**info, "status": "in-band" if inside else "out-of-band",
                                      "excluded_mass": d.excluded_mass}, key))
    verdict = Verdict("sensitivity", evidence, indeterminate=qualifying == 0,
                      details=_annotate({"qualifying_pairs": qualifying, "sub_threshold_pairs": skipped}, model))
    if qualifying == 0:
        verdict.summary = "sensitivity indeterminate: no pair of instantiations differs by more than tau"
        verdict.details["no_qualifying_pair"] = True
    elif verdict.violations:
        verdict.summary = f"sensitivity FAIL: {len(verdict.violations)} of {qualifying} ordered pairs outside band"
    else:
        verdict.summary = f"sensitivity PASS: {qualifying} ordered pairs inside band ({skipped} sub-threshold)"
    return verdict


def _grace_windows(starts: np.ndarray, ends: np.ndarray, event_ticks: list[int], grace: int) -> set[int]:
    """Indices of windows touched by an event, plus ``grace`` windows after the last one touched."""
    out: set[int] = set()
    for te in event_ticks:
        touched = np.flatnonzero((starts <= te) & (ends >= te))
        if touched.size == 0:
            after = np.flatnonzero(starts > te)
            if after.size == 0:
                continue
            touched = after[:1]
        out.update(range(int(touched[0]), int(touched[-1]) + grace + 1))
    return out


def check_stability(trace: Trace, params: StabilityParams = StabilityParams(), binning: BinningSpec | None = None,
                    model: ModelDescriptor | None = None, event_tag: str = CIRCUMSTANCE_CHANGE) -> Verdict:
    """Lyapunov-style check on the window-to-window divergence sequence.

    D[k] = KL(P_k(Y|X) || P_{k-1}(Y|X)) over consecutive sliding windows.
    PASS iff D[k] - D[k-1] <= eta for every window k outside the grace
    region of a marked circumstance change.
    """
    W, s = params.width, params.stride
    n = len(trace)
    n_windows = (n - W) // s + 1 if n >= W else 0
    base = {"width": W, "stride": s, "eta": params.eta, "grace": params.grace, "n_windows": n_windows}
    if n_windows < 3:
        return Verdict("stability", [], f"stability indeterminate: {n_windows} windows, need at least 3",
                       indeterminate=True, details=_annotate(base, model))
    binning, xc, yc = _cells(trace, binning)
    starts_idx = np.arange(n_windows) * s
    dists: list[ConditionalDistribution] = [
        conditional_from_cells(binning, xc[a:a + W], yc[a:a + W]) for a in starts_idx]
    ticks = trace.t
    starts, ends = ticks[starts_idx], ticks[starts_idx + W - 1]
    events = trace.event_times(event_tag)
    grace = _grace_windows(starts, ends, events, params.grace)

    d_seq: list[float | None] = [None]
    for k in range(1, n_windows):
        try:
            d_seq.append(conditional_kl(dists[k], dists[k - 1], pooled_x_marginal(dists[k], dists[k - 1])).value)
        except InsufficientDataError:
            d_seq.append(None)

    evidence = []
    checked = 0
    for k in range(2, n_windows):
        info = {"window": k, "t_start": int(starts[k]), "t_end": int(ends[k])}
        if k in grace:
            evidence.append(Evidence(f"window:{k}", None, params.eta, False, {**info, "status": "grace"}, (k,)))
            continue
        if d_seq[k] is None or d_seq[k - 1] is None:
            evidence.append(Evidence(f"window:{k}", None, params.eta, False,
                                     {**info, "status": "no overlapping input cells"}, (k,)))
            continue
        checked += 1
        inc = d_seq[k] - d_seq[k - 1]
        evidence.append(Evidence(f"window:{k}", inc, params.eta, inc > params.eta,
                                 {**info, "status": "checked"}, (k,)))
    details = _annotate({**base, "d_kl": d_seq, "window_starts": [int(v) for v in starts],
                         "events": events, "grace_windows": sorted(grace)}, model)
    verdict = Verdict("stability", evidence, indeterminate=checked == 0, details=details)
    if checked == 0:
        verdict.summary = "stability indeterminate: every window lies in a grace region"
    elif verdict.violations:
        ts = [e.info["t_start"] for e in verdict.violations]
        verdict.summary = (f"stability FAIL: divergence increased by more than {params.eta} nats at "
                           f"{len(ts)} windows (first at t={ts[0]})")
    else:
        verdict.summary = f"stability PASS: {checked} windows non-increasing within {params.eta} nats"
    return verdict
