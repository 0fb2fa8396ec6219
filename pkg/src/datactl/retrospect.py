"""Retrospective trust scoring from past predictions and realized outcomes.

Each accepted pair contributes a normalized RMS discrepancy; an EWMA over
an effective horizon H smooths it, and trust = exp(-beta * EWMA). The
complement of trust is broadcast as a conservatism level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

HORIZON = 50
BETA = 1.0


@dataclass(frozen=True)
class PredictionPair:
    """``y_hat`` was issued ``k`` ticks before ``t``; ``y`` is what happened at ``t``."""

    t: int
    y_hat: tuple[float, ...]
    y: tuple[float, ...]
    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "y_hat", tuple(float(v) for v in self.y_hat))
        object.__setattr__(self, "y", tuple(float(v) for v in self.y))
        if len(self.y_hat) != len(self.y) or not self.y:
            raise DataError("predicted and realized outputs must have the same non-zero dimension")
        if self.k < 1:
            raise DataError("prediction horizon k must be >= 1")

    @classmethod
    def from_json(cls, obj) -> "PredictionPair":
        if not isinstance(obj, dict):
            raise DataError("prediction pair must be a JSON object")
        try:
            return cls(int(obj["t"]), obj["y_hat"], obj["y"], int(obj.get("k", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid prediction pair: {exc}") from None


@dataclass(frozen=True)
class TrustState:
    """Immutable snapshot; :func:`update_trust` returns a new state."""

    horizon: int = HORIZON
    beta: float = BETA
    window: tuple[float, ...] = ()
    ewma: float = 0.0
    accepted: int = 0
    rejected: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise DataError("horizon must be >= 1")
        if not self.beta > 0:
            raise DataError("beta must be positive")

    @property
    def rho(self) -> float:
        return 2.0 / (self.horizon + 1)

    @property
    def trust(self) -> float:
        # clamp keeps trust strictly positive when beta * ewma underflows exp
        return max(math.exp(-self.beta * self.ewma), math.ulp(0.0))

    @property
    def conservatism(self) -> float:
        return 1.0 - self.trust


def discrepancy(pair: PredictionPair, scale: Sequence[float]) -> float:
    diff = (np.asarray(pair.y_hat) - np.asarray(pair.y)) / np.asarray(scale, dtype=float)
    m = float(np.max(np.abs(diff)))
    if m == 0.0 or not math.isfinite(m):
        return m
    return m * float(np.sqrt(np.mean((diff / m) ** 2)))


def update_trust(state: TrustState, pair: PredictionPair, scale: Sequence[float] | None = None) -> TrustState:
    """Fold one pair into the state. Non-finite pairs are rejected and only counted."""
    dim = len(pair.y)
    scale = np.ones(dim) if scale is None else np.asarray(scale, dtype=float)
    if scale.shape != (dim,):
        raise DataError(f"scale has {scale.size} entries, outputs have {dim}")
    if not np.all(scale > 0):
        raise DataError("scale entries must be positive")
    if not all(math.isfinite(v) for v in pair.y_hat + pair.y):
        return replace(state, rejected=state.rejected + 1)
    d = discrepancy(pair, scale)
    if not math.isfinite(d):
        return replace(state, rejected=state.rejected + 1)
    ewma = (1.0 - state.rho) * state.ewma + state.rho * d
    window = (state.window + (d,))[-state.horizon:]
    return replace(state, window=window, ewma=ewma, accepted=state.accepted + 1)


def replay(pairs: Iterable[PredictionPair], scale: Sequence[float] | None = None,
           horizon: int = HORIZON, beta: float = BETA) -> list[TrustState]:
    state = TrustState(horizon, beta)
    states = []
    for p in pairs:
        state = update_trust(state, p, scale)
        states.append(state)
    return states


def auto_scale(pairs: Sequence[PredictionPair]) -> np.ndarray:
    """Per-dimension std of finite realized outputs; dimensions with zero spread get scale 1."""
    Y = np.array([p.y for p in pairs], dtype=float)
    if Y.size == 0:
        raise DataError("no prediction pairs")
    std = np.array([np.std(c[np.isfinite(c)]) if np.isfinite(c).any() else 0.0 for c in Y.T])
    return np.where(std > 0, std, 1.0)


def trust_report(state: TrustState) -> dict:
    if state.accepted == 0:
        return {"status": "indeterminate", "trust": None, "conservatism": None,
                "accepted": 0, "rejected": state.rejected}
    w = np.asarray(state.window)
    return {"status": "ok", "trust": state.trust, "conservatism": state.conservatism, "ewma": state.ewma,
            "accepted": state.accepted, "rejected": state.rejected,
            "window": {"n": len(w), "min": float(w.min()), "max": float(w.max()), "mean": float(w.mean())}}


def read_pairs(path) -> list[PredictionPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            try:
                pairs.append(PredictionPair.from_json(obj))
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    if not pairs:
        raise DataError("no prediction pairs")
    return pairs
