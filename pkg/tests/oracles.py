"""Independent reference computations used by the tests.

Nothing here imports the estimators under test; the oracles work from the
closed-form models and scipy.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad
from scipy.stats import norm


def bernoulli_kl(p: float, q: float) -> float:
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def lv_invariant(prey_growth, predation, predator_death, conversion, x1, x2):
    return conversion * x1 - predator_death * np.log(x1) + predation * x2 - prey_growth * np.log(x2)


def dynamic_terminal_mean(a, b, c, prefix, terminal, d=0.0):
    """Output mean after feeding ``prefix`` then ``terminal`` from h=0, state updated before output."""
    h = 0.0
    for x in prefix:
        h = a * h + b * x
    h = a * h + b * terminal
    return c * h + d * terminal


def _open_edges(edges):
    e = np.array(edges, dtype=float)
    e[0], e[-1] = -np.inf, np.inf
    return e


def binned_linear_gaussian(gain: float, sigma: float, x_edges, y_edges, x_mean=0.0, x_std=1.0):
    """P(x-cell) and P(y-cell | x-cell) for y = gain*x + N(0, sigma^2), x ~ N(x_mean, x_std^2).

    Outer edges extend to infinity, mirroring clamping into edge cells.
    """
    xe, ye = _open_edges(x_edges), _open_edges(y_edges)
    px, rows = [], []
    for a, b in zip(xe[:-1], xe[1:]):
        pc = norm.cdf(b, x_mean, x_std) - norm.cdf(a, x_mean, x_std)
        px.append(pc)
        row = []
        for c, d in zip(ye[:-1], ye[1:]):
            f = lambda x, c=c, d=d: norm.pdf(x, x_mean, x_std) * (
                norm.cdf((d - gain * x) / sigma) - norm.cdf((c - gain * x) / sigma))
            row.append(quad(f, a, b, limit=200)[0] / pc if pc > 0 else 0.0)
        rows.append(row)
    return np.array(px), np.array(rows)


def binned_conditional_kl(p_rows, q_rows, weights, floor=1e-12) -> float:
    """sum_x w(x) KL(p(.|x) || q(.|x)), ignoring cells where either side carries < floor mass."""
    total = 0.0
    for w, p, q in zip(weights, p_rows, q_rows):
        m = (p > floor) & (q > floor)
        total += w * float(np.sum(p[m] * np.log(p[m] / q[m])))
    return total / float(np.sum(weights))


def gaussian_gain_kl(g1: float, g2: float, sigma: float, x_edges, y_edges) -> float:
    px, p = binned_linear_gaussian(g1, sigma, x_edges, y_edges)
    _, q = binned_linear_gaussian(g2, sigma, x_edges, y_edges)
    return binned_conditional_kl(p, q, px)


def ewma_trust(ds, horizon: int, beta: float) -> float:
    rho = 2.0 / (horizon + 1)
    e = 0.0
    for d in ds:
        e = (1 - rho) * e + rho * d
    return math.exp(-beta * e)
