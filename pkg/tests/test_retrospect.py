from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datactl.errors import DataError
from datactl.retrospect import (
    PredictionPair,
    TrustState,
    auto_scale,
    discrepancy,
    read_pairs,
    replay,
    trust_report,
    update_trust,
)
from oracles import ewma_trust

finite = st.floats(-100, 100, allow_nan=False)


def _pairs(ds):
    return [PredictionPair(t, (d,), (0.0,)) for t, d in enumerate(ds)]


def test_perfect_predictions_give_full_trust():
    state = replay(_pairs([0.0] * 200))[-1]
    assert state.trust == 1.0 and state.conservatism == 0.0


def test_step_response_matches_oracle():
    ds = [1.0] * 500
    states = replay(_pairs(ds), horizon=50)
    assert states[-1].trust == pytest.approx(math.exp(-1), abs=1e-3)
    assert states[99].trust == pytest.approx(ewma_trust(ds[:100], 50, 1.0), rel=1e-12)


def test_discrepancy_is_normalized_rms():
    p = PredictionPair(0, (3.0, 0.0), (0.0, 4.0))
    assert discrepancy(p, [1.0, 2.0]) == pytest.approx(math.sqrt((9 + 4) / 2))


def test_non_finite_pairs_are_rejected():
    s = update_trust(TrustState(), PredictionPair(0, (math.nan,), (0.0,)))
    assert (s.accepted, s.rejected, s.trust) == (0, 1, 1.0)
    assert trust_report(s)["status"] == "indeterminate"


def test_report_window():
    s = replay(_pairs([0.0, 1.0, 2.0]), horizon=2)[-1]
    rep = trust_report(s)
    assert rep["window"] == {"n": 2, "min": 1.0, "max": 2.0, "mean": 1.5}
    assert rep["trust"] + rep["conservatism"] == 1.0


def test_validation():
    with pytest.raises(DataError):
        PredictionPair(0, (1.0,), (1.0, 2.0))
    with pytest.raises(DataError):
        TrustState(horizon=0)
    with pytest.raises(DataError):
        update_trust(TrustState(), PredictionPair(0, (1.0,), (1.0,)), scale=[0.0])


def test_auto_scale_and_reader(tmp_path):
    pairs = [PredictionPair(t, (0.0, 1.0), (float(t), 5.0)) for t in range(4)]
    assert auto_scale(pairs).tolist() == pytest.approx([np.std([0, 1, 2, 3]), 1.0])
    path = tmp_path / "p.jsonl"
    path.write_text("\n".join(json.dumps({"t": p.t, "y_hat": list(p.y_hat), "y": list(p.y)}) for p in pairs) + "\n")
    assert read_pairs(path) == pairs
    path.write_text('{"t": 0, "y_hat": [1]}\n')
    with pytest.raises(DataError, match="line 1"):
        read_pairs(path)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=60), st.integers(1, 30), st.floats(0.1, 5))
@settings(max_examples=60)
def test_trust_bounded_and_complementary(ds, horizon, beta):
    for s in replay(_pairs(ds), horizon=horizon, beta=beta):
        assert 0 < s.trust <= 1
        assert s.trust + s.conservatism == pytest.approx(1.0, abs=1e-15)


@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 5)), min_size=1, max_size=60), st.integers(1, 30))
@settings(max_examples=60)
def test_larger_discrepancy_never_raises_trust(rows, horizon):
    base = [d for d, _ in rows]
    worse = [d + extra for d, extra in rows]
    a = replay(_pairs(base), horizon=horizon)[-1].trust
    b = replay(_pairs(worse), horizon=horizon)[-1].trust
    assert b <= a


@given(st.integers(1, 40), st.floats(0.1, 3))
@settings(max_examples=30)
def test_constant_discrepancy_converges(horizon, beta):
    s = replay(_pairs([1.0] * (10 * horizon + 50)), horizon=horizon, beta=beta)[-1]
    assert s.trust == pytest.approx(math.exp(-beta), abs=1e-3)
