from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datactl.errors import DataError, InsufficientDataError
from datactl.properties import (
    RobustnessSpec,
    SensitivityEntry,
    SensitivitySpec,
    StabilityParams,
    Verdict,
    Evidence,
    check_robustness,
    check_sensitivity,
    check_stability,
    factor_groups,
)
from datactl.refsys import (
    ContextSignal,
    NonStationaryModel,
    PSDKnobs,
    StaticModel,
    generate_trace,
)
from datactl.stats import BinningSpec
from datactl.trace import CIRCUMSTANCE_CHANGE, Trace, TraceRecord

BINS = BinningSpec.uniform([(-4.0, 4.0)], 8, [(-8.0, 8.0)], 8)


def _records(x, y, t0=0, circ=None, events=None):
    out = []
    for i, (a, b) in enumerate(zip(x, y)):
        ev = frozenset(events.get(t0 + i, ())) if events else frozenset()
        out.append(TraceRecord(t0 + i, (float(a),), (float(b),), circ or {}, ev))
    return out


def _two_group_trace(w_b, n=2000, seed=0):
    """Factor f takes values 0 and 1; y = w x + noise with weight w_b when f = 1."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    f = np.arange(n) % 2
    y = np.where(f == 1, w_b, 1.0) * x + 0.5 * rng.standard_normal(n)
    return Trace.from_records(TraceRecord(t, (float(x[t]),), (float(y[t]),), {"f": float(f[t])}) for t in range(n))


# -- grouping ---------------------------------------------------------------

def test_factor_groups_distinct_and_quantile():
    vals = np.array([0, 1, 1, 2, np.nan, 5.0])
    groups, oob, unspec = factor_groups(vals, 4, (-1, 3))
    assert [g.label for g in groups] == ["0", "1", "2"]
    assert (oob, unspec) == (1, 1)
    assert groups[1].mask.tolist() == [False, True, True, False, False, False]
    groups, _, _ = factor_groups(np.arange(100.0), 4)
    assert [g.label for g in groups] == ["q0", "q1", "q2", "q3"]
    assert [int(g.mask.sum()) for g in groups] == [25] * 4


def test_bound_edges_are_excluded():
    groups, oob, _ = factor_groups(np.array([0.0, 0.5, 1.0]), 4, (0.0, 1.0))
    assert [g.value for g in groups] == [0.5] and oob == 2


# -- robustness -------------------------------------------------------------

def test_robustness_identical_groups_have_zero_statistic():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal(500), rng.standard_normal(500)
    recs = [TraceRecord(t, (float(x[t % 500]),), (float(y[t % 500]),), {"f": float(t // 500)})
            for t in range(1000)]
    v = check_robustness(Trace.from_records(recs), RobustnessSpec(("f",), {"f": (-1, 2)}), BINS)
    assert v.passed and v.status == "pass" and v.exit_code == 0
    assert [e.statistic for e in v.evidence] == [0.0]


def test_robustness_pass_and_fail():
    spec = RobustnessSpec(("f",), {"f": (-1, 2)})
    ok = check_robustness(_two_group_trace(1.0), spec, BINS)
    bad = check_robustness(_two_group_trace(2.0), spec, BINS)
    assert ok.passed
    assert not bad.passed and bad.exit_code == 1
    assert [e.id for e in bad.violations] == ["f:0|1"]
    assert "f:0|1" in bad.summary


def test_robustness_errors():
    tr = _two_group_trace(1.0)
    with pytest.raises(DataError):
        check_robustness(tr, RobustnessSpec(("g",), {"g": (0, 1)}))
    with pytest.raises(InsufficientDataError, match="coverage"):
        check_robustness(tr, RobustnessSpec(("f",), {"f": (0.5, 2)}))
    with pytest.raises(DataError):
        RobustnessSpec(("f",), {})
    with pytest.raises(DataError):
        RobustnessSpec.from_json({"factors": ["f"], "bounds": {"f": [0, 1]}, "bogus": 1})


def test_robustness_reports_coverage():
    spec = RobustnessSpec(("f",), {"f": (-1, 1)})
    rng = np.random.default_rng(0)
    recs = [TraceRecord(t, (float(rng.standard_normal()),), (0.0,), {"f": float(t % 4) - 1.5}) for t in range(400)]
    v = check_robustness(Trace.from_records(recs), spec, BINS)
    cov = v.details["coverage"]["f"]
    assert cov["out_of_bounds"] == 200 and len(cov["groups"]) == 2


@given(st.floats(1.0, 2.5), st.lists(st.floats(1e-4, 2.0), min_size=2, max_size=5))
@settings(max_examples=25, deadline=None)
def test_robustness_kappa_monotone(w_b, kappas):
    tr = _two_group_trace(w_b, n=600)
    passed = [check_robustness(tr, RobustnessSpec(("f",), {"f": (-1, 2)}, kappa_rob=k), BINS).passed
              for k in sorted(kappas)]
    # once passing, a larger tolerance keeps passing
    assert passed == sorted(passed)


# -- sensitivity ------------------------------------------------------------

def _ctx_trace(n=10_000, seed=0):
    return generate_trace(NonStationaryModel(), n, seed=seed, knobs=PSDKnobs(context=ContextSignal()))


def test_sensitivity_sub_threshold_pairs_are_skipped():
    tr = _ctx_trace()
    spec = SensitivitySpec({"ctx": SensitivityEntry(tau=0.5, alpha=0.1, epsilon=0.05)})
    v = check_sensitivity(tr, spec)
    sub = [e for e in v.evidence if e.info["status"] == "sub-threshold"]
    assert sub and all(e.info["delta"] <= 0.5 and not e.violated and e.statistic is None for e in sub)
    assert v.details["sub_threshold_pairs"] == len(sub)
    assert v.details["qualifying_pairs"] == len(v.evidence) - len(sub) == 6


def test_sensitivity_all_sub_threshold_is_indeterminate():
    v = check_sensitivity(_ctx_trace(), SensitivitySpec({"ctx": {"tau": 5.0, "alpha": 0.1, "epsilon": 0.05}}))
    assert v.status == "indeterminate" and v.exit_code == 2 and v.details["no_qualifying_pair"]


def test_sensitivity_identical_segments_fail():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(1000), rng.standard_normal(1000)
    recs = [TraceRecord(t, (float(x[t % 1000]),), (float(y[t % 1000]),), {"c": float(t // 1000)})
            for t in range(3000)]
    v = check_sensitivity(Trace.from_records(recs), SensitivitySpec({"c": {"tau": 0.5, "alpha": 0.1, "epsilon": 0.05}}),
                          BINS)
    assert not v.passed and all(e.statistic == 0.0 for e in v.violations) and len(v.violations) == 6


@given(st.lists(st.floats(0.001, 0.149), min_size=2, max_size=5))
@settings(max_examples=15, deadline=None)
def test_sensitivity_widening_band_never_breaks_pass(epsilons):
    tr = _ctx_trace(4000, seed=3)
    passed = [check_sensitivity(tr, SensitivitySpec({"ctx": {"tau": 0.5, "alpha": 0.15, "epsilon": e}})).passed
              for e in sorted(epsilons)]
    assert passed == sorted(passed)


def test_sensitivity_entry_validation():
    assert SensitivityEntry(0.5, 0.2, 0.1).band(1.0) == pytest.approx((0.2, 0.6))
    with pytest.raises(DataError):
        SensitivityEntry(0.0, 0.2, 0.1)


# -- stability --------------------------------------------------------------

def _periodic_trace(block, reps, events=None):
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal(block), rng.standard_normal(block)
    return Trace.from_records(_records(np.tile(x, reps), np.tile(y, reps), events=events))


@given(st.floats(0.0, 1.0))
@settings(max_examples=10, deadline=None)
def test_stability_identical_windows_pass_for_any_eta(eta):
    tr = _periodic_trace(200, 6)
    v = check_stability(tr, StabilityParams(width=200, stride=200, eta=eta), BINS)
    assert v.passed
    assert v.details["d_kl"][1:] == [0.0] * 5


def test_stability_event_window_is_excluded():
    rng = np.random.default_rng(7)
    n, W = 1200, 200
    x = rng.standard_normal(n)
    y = x + 0.3 * rng.standard_normal(n)
    y[600:] = -x[600:] + 0.3 * rng.standard_normal(n - 600)  # step change at t=600
    plain = Trace.from_records(_records(x, y))
    marked = Trace.from_records(_records(x, y, events={600: [CIRCUMSTANCE_CHANGE]}))
    params = StabilityParams(width=W, stride=W, eta=0.02, grace=0)
    v_plain = check_stability(plain, params, BINS)
    v_marked = check_stability(marked, params, BINS)
    assert not v_plain.passed and [e.id for e in v_plain.violations] == ["window:3"]
    assert v_marked.passed and v_marked.details["grace_windows"] == [3]


def test_stability_grace_extends_after_event():
    tr = _periodic_trace(100, 10, events={250: [CIRCUMSTANCE_CHANGE]})
    v = check_stability(tr, StabilityParams(width=100, stride=100, grace=2), BINS)
    assert v.details["grace_windows"] == [2, 3, 4]
    assert [e.info["status"] for e in v.evidence if e.info["window"] in (2, 3, 4)] == ["grace"] * 3


def test_stability_short_trace_indeterminate():
    tr = _periodic_trace(100, 2)
    v = check_stability(tr, StabilityParams(width=100, stride=100))
    assert v.status == "indeterminate" and v.exit_code == 2 and not v.evidence


def test_stability_params_validation():
    with pytest.raises(DataError):
        StabilityParams(width=10)
    with pytest.raises(DataError):
        StabilityParams(eta=-1)


# -- verdict invariants -----------------------------------------------------

@given(st.lists(st.tuples(st.one_of(st.none(), st.floats(0, 1)), st.booleans()), max_size=8), st.booleans())
def test_verdict_consistency(entries, indeterminate):
    ev = [Evidence(f"e{i}", s, 0.5, viol) for i, (s, viol) in enumerate(entries)]
    v = Verdict("x", ev, indeterminate=indeterminate)
    assert v.passed == (not indeterminate and not any(viol for _, viol in entries))
    assert v.exit_code == {"pass": 0, "fail": 1, "indeterminate": 2}[v.status]
    assert v.to_json()["pass"] == v.passed


@pytest.mark.parametrize("seed", range(3))
def test_checker_verdicts_match_evidence(seed):
    tr = generate_trace(StaticModel(), 3000, seed=seed,
                        knobs=PSDKnobs(context=ContextSignal(name="n", kind="uniform")))
    for v in (check_robustness(tr, RobustnessSpec(("n",), {"n": (0, 1)})),
              check_sensitivity(tr, SensitivitySpec({"n": {"tau": 0.1, "alpha": 0.01, "epsilon": 0.005}})),
              check_stability(tr)):
        assert v.passed == (v.status == "pass") == (not v.indeterminate and not v.violations)
