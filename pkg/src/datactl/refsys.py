"""Reference data-generating processes with known ground truth.

* Lotka-Volterra predator/prey dynamics integrated with fixed-step RK4.
* Three toy systems: a static linear-Gaussian map, a context-conditioned
  (non-stationary, memoryless) map and a linear-Gaussian state model with
  contracting memory.
* Simulator knobs for the factors that move P(Y|X): scheduled interventions,
  an observable context signal, hidden parameter drift, a hidden confounder
  and an environment tag.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .errors import DataError
from .trace import CIRCUMSTANCE_CHANGE, Trace, TraceRecord

CONTEXT_CHANGE = "context_change"
MAX_HALVINGS = 20


# ---------------------------------------------------------------------------
# Lotka-Volterra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LotkaVolterraParams:
    """Rates and initial populations for dX1/dt = X1(e1 - g1 X2), dX2/dt = -X2(e2 - g2 X1)."""

    prey_growth: float = 1.0      # e1
    predation: float = 0.5        # g1
    predator_death: float = 0.8   # e2
    conversion: float = 0.4       # g2
    prey0: float = 3.0
    predator0: float = 2.0
    dt: float = 1e-3

    def __post_init__(self):
        if min(self.prey_growth, self.predator_death, self.conversion) <= 0 or self.predation < 0:
            raise DataError("Lotka-Volterra rates must be positive")
        if self.prey0 <= 0 or self.predator0 <= 0:
            raise DataError("initial populations must be positive")
        if self.dt <= 0:
            raise DataError("dt must be positive")

    @property
    def equilibrium(self) -> tuple[float, float]:
        x2 = self.prey_growth / self.predation if self.predation else math.inf
        return (self.predator_death / self.conversion, x2)


def _lv_rhs(p: LotkaVolterraParams, x1: float, x2: float) -> tuple[float, float]:
    return x1 * (p.prey_growth - p.predation * x2), -x2 * (p.predator_death - p.conversion * x1)


def _rk4(p: LotkaVolterraParams, x1: float, x2: float, h: float) -> tuple[float, float]:
    a1, a2 = _lv_rhs(p, x1, x2)
    b1, b2 = _lv_rhs(p, x1 + 0.5 * h * a1, x2 + 0.5 * h * a2)
    c1, c2 = _lv_rhs(p, x1 + 0.5 * h * b1, x2 + 0.5 * h * b2)
    d1, d2 = _lv_rhs(p, x1 + h * c1, x2 + h * c2)
    return (x1 + h / 6.0 * (a1 + 2 * b1 + 2 * c1 + d1),
            x2 + h / 6.0 * (a2 + 2 * b2 + 2 * c2 + d2))


def _lv_advance(p: LotkaVolterraParams, x1: float, x2: float, h: float, depth: int = 0) -> tuple[float, float]:
    n1, n2 = _rk4(p, x1, x2, h)
    if n1 > 0 and n2 > 0 and math.isfinite(n1) and math.isfinite(n2):
        return n1, n2
    if depth >= MAX_HALVINGS:
        raise DataError("stiff configuration: populations cross zero after repeated step halving")
    m1, m2 = _lv_advance(p, x1, x2, 0.5 * h, depth + 1)
    return _lv_advance(p, m1, m2, 0.5 * h, depth + 1)


def lv_simulate(params: LotkaVolterraParams, t_end: float, sample_every: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Integrate from t=0 to ``t_end`` with fixed step ``params.dt``.

    Returns ``(times, states)`` where ``states[:, 0]`` is prey and
    ``states[:, 1]`` predators, sampled every ``sample_every`` steps.
    A step that would push a population to or below zero is retried as two
    half steps, recursively up to 20 times.
    """
    if t_end < 0:
        raise DataError("t_end must be >= 0")
    n_steps = int(round(t_end / params.dt))
    x1, x2 = params.prey0, params.predator0
    times = [0.0]
    out = [(x1, x2)]
    h = params.dt
    for k in range(1, n_steps + 1):
        x1, x2 = _lv_advance(params, x1, x2, h)
        if k % sample_every == 0:
            times.append(k * h)
            out.append((x1, x2))
    return np.array(times), np.array(out)


def lv_invariant(params: LotkaVolterraParams, states: np.ndarray) -> np.ndarray:
    """First integral g2 X1 - e2 ln X1 + g1 X2 - e1 ln X2 along a trajectory."""
    states = np.asarray(states, dtype=float)
    x1, x2 = states[..., 0], states[..., 1]
    return (params.conversion * x1 - params.predator_death * np.log(x1)
            + params.predation * x2 - params.prey_growth * np.log(x2))


# ---------------------------------------------------------------------------
# Toy AI systems
# ---------------------------------------------------------------------------

def _vec(v) -> tuple[float, ...]:
    if isinstance(v, (int, float)):
        return (float(v),)
    return tuple(float(u) for u in v)


@dataclass(frozen=True)
class StaticModel:
    """y = w . x + bias + N(0, sigma^2); P(Y|X) never changes."""

    w: tuple[float, ...] = (1.0,)
    sigma: float = 0.5
    bias: float = 0.0
    kind = "static"

    def __post_init__(self):
        object.__setattr__(self, "w", _vec(self.w))
        if self.sigma <= 0:
            raise DataError("sigma must be positive")

    @property
    def x_dim(self) -> int:
        return len(self.w)

    def mean(self, x: np.ndarray, ctx: float, h: float) -> float:
        return float(np.dot(self.w, x)) + self.bias


@dataclass(frozen=True)
class NonStationaryModel:
    """y = g(ctx) * (w . x) + N(0, sigma^2), g piecewise linear through (ctx_points, ctx_gains).

    The relationship follows the current context input and keeps no state.
    """

    w: tuple[float, ...] = (1.0,)
    sigma: float = 0.5
    ctx_points: tuple[float, ...] = (0.0, 1.5)
    ctx_gains: tuple[float, ...] = (1.0, 1.75)
    kind = "nonstat"

    def __post_init__(self):
        object.__setattr__(self, "w", _vec(self.w))
        object.__setattr__(self, "ctx_points", _vec(self.ctx_points))
        object.__setattr__(self, "ctx_gains", _vec(self.ctx_gains))
        if self.sigma <= 0:
            raise DataError("sigma must be positive")
        if len(self.ctx_points) != len(self.ctx_gains) or not self.ctx_points:
            raise DataError("ctx_points and ctx_gains must be non-empty and equally long")
        if any(b <= a for a, b in zip(self.ctx_points, self.ctx_points[1:])):
            raise DataError("ctx_points must be strictly increasing")

    @property
    def x_dim(self) -> int:
        return len(self.w)

    def gain(self, ctx: float) -> float:
        if not math.isfinite(ctx):
            ctx = self.ctx_points[0]
        return float(np.interp(ctx, self.ctx_points, self.ctx_gains))

    def mean(self, x: np.ndarray, ctx: float, h: float) -> float:
        return self.gain(ctx) * float(np.dot(self.w, x))


@dataclass(frozen=True)
class DynamicModel:
    """Linear-Gaussian state model with memory.

    Each step first updates the state, h <- a*h + b.x, then emits
    y = c*h + d.x + N(0, sigma^2).
    """

    a: float = 0.9
    b: tuple[float, ...] = (1.0,)
    c: float = 1.0
    d: tuple[float, ...] = (0.0,)
    sigma: float = 0.5
    kind = "dynamic"

    def __post_init__(self):
        object.__setattr__(self, "b", _vec(self.b))
        object.__setattr__(self, "d", _vec(self.d))
        if self.sigma <= 0:
            raise DataError("sigma must be positive")
        if len(self.b) != len(self.d):
            raise DataError("b and d must have the input dimension")

    @property
    def x_dim(self) -> int:
        return len(self.b)

    def next_state(self, h: float, x: np.ndarray) -> float:
        return self.a * h + float(np.dot(self.b, x))

    def mean(self, x: np.ndarray, ctx: float, h: float) -> float:
        return self.c * h + float(np.dot(self.d, x))


ToyModel = Union[StaticModel, NonStationaryModel, DynamicModel]
MODEL_TYPES = {"static": StaticModel, "nonstat": NonStationaryModel, "dynamic": DynamicModel}


class SystemHandle:
    """Resettable black-box wrapper with ``reset()`` and ``step(x) -> y``.

    The handle owns the random stream and, for dynamic models, the hidden
    state. ``set_context`` fixes the context value seen by later steps.
    """

    def __init__(self, model: ToyModel, seed: int = 0, ctx: float = 0.0):
        self.model = model
        self.x_dim = model.x_dim
        self._rng = np.random.default_rng(seed)
        self._h = 0.0
        self._ctx = ctx

    def reset(self) -> None:
        self._h = 0.0

    def set_context(self, ctx: float) -> None:
        self._ctx = float(ctx)

    def step(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.x_dim,):
            raise DataError(f"expected input of dimension {self.x_dim}")
        if isinstance(self.model, DynamicModel):
            self._h = self.model.next_state(self._h, x)
        mu = self.model.mean(x, self._ctx, self._h)
        return np.array([mu + self.model.sigma * self._rng.standard_normal()])


# ---------------------------------------------------------------------------
# Simulator knobs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InputProcess:
    """Distribution the simulator draws inputs from.

    ``normal``: iid N(mean, std^2). ``uniform``: iid U(low, high).
    ``regimes``: a level drawn from N(mean, regime_scale^2) held for
    ``regime_length`` ticks, plus iid N(0, std^2) around it.
    """

    kind: str = "normal"
    mean: float = 0.0
    std: float = 1.0
    low: float = 0.0
    high: float = 1.0
    regime_length: int = 1000
    regime_scale: float = 1.5

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "regimes"):
            raise DataError(f"unknown input process {self.kind!r}")
        if self.std < 0 or self.regime_length < 1:
            raise DataError("invalid input process parameters")


@dataclass(frozen=True)
class ContextSignal:
    """Observable context, emitted as circumstance ``name`` on every record.

    ``blocks`` cycles through ``levels``, holding each for ``block_length``
    ticks; ``uniform`` draws iid values in [low, high].
    """

    name: str = "ctx"
    kind: str = "blocks"
    levels: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5)
    block_length: int = 2500
    low: float = 0.0
    high: float = 1.0
    as_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "levels", _vec(self.levels))
        if self.kind not in ("blocks", "uniform"):
            raise DataError(f"unknown context kind {self.kind!r}")
        if self.block_length < 1 or not self.levels:
            raise DataError("invalid context signal")


@dataclass(frozen=True)
class Intervention:
    """Deliberate change applied from tick ``t`` on.

    ``target`` selects what ``changes`` overrides: ``model`` parameters,
    ``input`` process parameters, or the hidden ``state`` (key ``h``).
    """

    t: int
    changes: Mapping[str, object] = field(default_factory=dict)
    target: str = "model"

    def __post_init__(self):
        if self.target not in ("model", "input", "state"):
            raise DataError(f"unknown intervention target {self.target!r}")


@dataclass(frozen=True)
class LatentDrift:
    """Hidden random walk on a model parameter vector, ``scale`` per tick."""

    param: str = "w"
    scale: float = 0.05


@dataclass(frozen=True)
class PSDKnobs:
    interventions: tuple[Intervention, ...] = ()
    context: ContextSignal | None = None
    drift: LatentDrift | None = None
    confounder: float = 0.0
    environment: str = ""

    def __post_init__(self):
        object.__setattr__(self, "interventions", tuple(sorted(self.interventions, key=lambda i: i.t)))


def default_inputs(model: ToyModel) -> InputProcess:
    """Dynamic models get slowly switching input regimes so that memory shows in P(Y|X)."""
    if isinstance(model, DynamicModel):
        return InputProcess(kind="regimes")
    return InputProcess()


def _replace(obj, changes: Mapping[str, object]):
    try:
        return dataclasses.replace(obj, **changes)
    except TypeError as exc:
        raise DataError(f"invalid intervention: {exc}") from None


def _draw_inputs(proc: InputProcess, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    if proc.kind == "uniform":
        return rng.uniform(proc.low, proc.high, size=(n, dim))
    base = rng.standard_normal((n, dim))
    if proc.kind == "normal":
        return proc.mean + proc.std * base
    n_blocks = -(-n // proc.regime_length)
    levels = proc.mean + proc.regime_scale * rng.standard_normal((n_blocks, dim))
    return np.repeat(levels, proc.regime_length, axis=0)[:n] + proc.std * base


def _draw_context(sig: ContextSignal, rng: np.random.Generator, n: int) -> np.ndarray:
    if sig.kind == "uniform":
        return rng.uniform(sig.low, sig.high, size=n)
    idx = (np.arange(n) // sig.block_length) % len(sig.levels)
    return np.asarray(sig.levels)[idx]


def generate_trace(model: ToyModel, n: int, seed: int = 0, knobs: PSDKnobs | None = None,
                   inputs: InputProcess | None = None) -> Trace:
    """Simulate ``n`` ticks of ``model`` under ``knobs``; a pure function of its arguments.

    Context values are emitted as circumstances; interventions add a
    ``circumstance_change`` event at their tick and context switches a
    ``context_change`` event. Drift and the confounder stay hidden.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    knobs = knobs or PSDKnobs()
    proc = inputs or default_inputs(model)
    dim = model.x_dim
    rng = np.random.default_rng(seed)

    pending = list(knobs.interventions)
    input_switches = [(i.t, i.changes) for i in pending if i.target == "input"]
    X = _draw_piecewise_inputs(proc, input_switches, rng, n, dim)
    ctx = _draw_context(knobs.context, rng, n) if knobs.context else np.full(n, math.nan)
    noise = rng.standard_normal(n)
    conf = rng.standard_normal(n) * knobs.confounder if knobs.confounder else np.zeros(n)
    drift_steps = None
    if knobs.drift:
        if not isinstance(getattr(model, knobs.drift.param, None), tuple):
            raise DataError(f"drift parameter {knobs.drift.param!r} is not a vector parameter")
        drift_steps = rng.standard_normal((n, len(getattr(model, knobs.drift.param)))) * knobs.drift.scale

    records = []
    h = 0.0
    current = model
    for t in range(n):
        events = set()
        while pending and pending[0].t <= t:
            iv = pending.pop(0)
            events.add(CIRCUMSTANCE_CHANGE)
            if iv.target == "model":
                current = _replace(current, iv.changes)
            elif iv.target == "state":
                h = float(iv.changes.get("h", h))
        if drift_steps is not None and t > 0:
            p = knobs.drift.param
            current = dataclasses.replace(current, **{p: tuple(np.add(getattr(current, p), drift_steps[t]))})
        if knobs.context and t > 0 and ctx[t] != ctx[t - 1]:
            events.add(CONTEXT_CHANGE)
        x = X[t] + conf[t]
        if isinstance(current, DynamicModel):
            h = current.next_state(h, x)
        y = current.mean(x, ctx[t], h) + current.sigma * noise[t] + conf[t]
        circ = {}
        x_out = tuple(float(v) for v in x)
        if knobs.context:
            circ[knobs.context.name] = float(ctx[t])
            if knobs.context.as_input:
                x_out = x_out + (float(ctx[t]),)
        records.append(TraceRecord(t, x_out, (float(y),), circ, frozenset(events)))
    source = f"{model.kind}:{knobs.environment}" if knobs.environment else model.kind
    return Trace.from_records(records, source=source)


def _draw_piecewise_inputs(proc: InputProcess, switches, rng, n: int, dim: int) -> np.ndarray:
    X = _draw_inputs(proc, rng, n, dim)
    for t0, changes in switches:
        if t0 >= n:
            continue
        proc = _replace(proc, changes)
        X[t0:] = _draw_inputs(proc, rng, n - t0, dim)
    return X


def generate_lv_trace(params: LotkaVolterraParams, n: int, sample_every: int = 10,
                      obs_noise: float = 0.0, seed: int = 0) -> Trace:
    """One-step-ahead population records: x = populations at a sample, y = at the next sample.

    ``obs_noise`` is a relative (multiplicative log-normal) measurement error.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    _, states = lv_simulate(params, (n + 1) * sample_every * params.dt, sample_every)
    states = states[: n + 1]
    if obs_noise > 0:
        rng = np.random.default_rng(seed)
        states = states * np.exp(obs_noise * rng.standard_normal(states.shape))
    records = [TraceRecord(k, tuple(map(float, states[k])), tuple(map(float, states[k + 1])))
               for k in range(n)]
    return Trace.from_records(records, source="lv")


def generate_anticausal_trace(n: int, seed: int = 0, prior: float = 0.5, separation: float = 1.0,
                              sigma: float = 1.0, t0: int = 0) -> Trace:
    """Label-causes-input process: y ~ Bernoulli(prior), x = separation * y + N(0, sigma^2).

    Changing ``prior`` between two runs is a pure output-prior (target) shift.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if not 0 < prior < 1 or sigma <= 0:
        raise DataError("prior must lie in (0, 1) and sigma must be positive")
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < prior).astype(float)
    x = separation * y + sigma * rng.standard_normal(n)
    records = [TraceRecord(t0 + k, (float(x[k]),), (float(y[k]),)) for k in range(n)]
    return Trace.from_records(records, source="anticausal")


def model_from_json(kind: str, obj: Mapping | None) -> ToyModel:
    if kind not in MODEL_TYPES:
        raise DataError(f"unknown model kind {kind!r}")
    try:
        return MODEL_TYPES[kind](**(obj or {}))
    except TypeError as exc:
        raise DataError(f"invalid {kind} model parameters: {exc}") from None


def knobs_from_json(obj: Mapping | None) -> PSDKnobs:
    obj = dict(obj or {})
    try:
        ivs = tuple(Intervention(**iv) for iv in obj.pop("interventions", []))
        ctx = obj.pop("context", None)
        drift = obj.pop("drift", None)
        return PSDKnobs(interventions=ivs,
                        context=ContextSignal(**ctx) if ctx is not None else None,
                        drift=LatentDrift(**drift) if drift is not None else None,
                        **obj)
    except TypeError as exc:
        raise DataError(f"invalid simulator knobs: {exc}") from None
