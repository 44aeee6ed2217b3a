"""Exact Bayes filter for the stochastic volatility model on a uniform grid.

The conditional density is tabulated and updated node by node: the
prediction integral is a dense trapezoid sum against the Gaussian transition
kernel and the correction multiplies by the observation likelihood.  It is
slow on purpose and serves as the reference for the projection filter.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import FinFiltError, QuadratureError
from .expfam import ExpFamilyDensity, MomentVector
from .svm import SvmParams

TAIL_MASS = 1e-10
MAX_EXTENSIONS = 12


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    h = nodes[1] - nodes[0]
    w = np.full(nodes.size, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True)
class GridDensity:
    """Density values on uniformly spaced nodes, normalised by the trapezoid rule."""

    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3 or nodes.shape != values.shape:
            raise ValueError("nodes and values must be 1-D arrays of equal length >= 3")
        steps = np.diff(nodes)
        if np.any(steps <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.max(np.abs(steps - steps[0])) > 1e-9 * abs(steps[0]) * nodes.size:
            raise ValueError("nodes must be uniformly spaced")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite and non-negative")
        mass = float(trapezoid_weights(nodes) @ values)
        if abs(mass - 1.0) > 1e-8:
            raise ValueError(f"density integrates to {mass:.12g}, not 1")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_unnormalized(cls, nodes, values) -> "GridDensity":
        nodes = np.asarray(nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        mass = trapezoid_weights(nodes) @ values
        if not (mass > 0 and np.isfinite(mass)):
            raise FinFiltError("density has zero or non-finite mass on the grid")
        return cls(nodes, values / mass)

    @classmethod
    def from_logpdf(cls, logpdf: Callable, nodes) -> "GridDensity":
        nodes = np.asarray(nodes, dtype=float)
        lv = np.asarray(logpdf(nodes), dtype=float)
        return cls.from_unnormalized(nodes, np.exp(lv - np.max(lv)))

    @property
    def spacing(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.nodes)

    def moments(self, count: int) -> np.ndarray:
        return grid_moments(self, count).values

    def expect(self, funcs: Sequence[Callable]) -> np.ndarray:
        wv = self.weights * self.values
        return np.array([wv @ np.asarray(f(self.nodes), dtype=float) for f in funcs])

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        v = np.interp(x, self.nodes, self.values, left=0.0, right=0.0)
        with np.errstate(divide="ignore"):
            return np.log(v)

    @property
    def mean(self) -> float:
        return float(self.moments(1)[0])

    @property
    def var(self) -> float:
        e1, e2 = self.moments(2)
        return float(e2 - e1 * e1)


def grid_moments(d: GridDensity, count: int) -> MomentVector:
    """Trapezoid moments ``sum_i x_i**j d(x_i) w_i`` for ``j = 1..count``."""
    wv = d.weights * d.values
    powers = d.nodes[None, :] ** np.arange(1, count + 1)[:, None]
    return MomentVector(powers @ wv, normalized=True)


def kl_to_grid(d: GridDensity, q: ExpFamilyDensity) -> float:
    """Trapezoid evaluation of ``D(d, q)``; nodes where ``d`` is zero contribute nothing."""
    logq = q.logpdf(d.nodes)
    pos = d.values > 0
    if not np.all(np.isfinite(logq[pos])):
        raise QuadratureError("q underflows on the support of the grid density")
    w = d.weights
    return float(np.sum(w[pos] * d.values[pos] * (np.log(d.values[pos]) - logq[pos])))


def default_grid(params: SvmParams, nodes: int = 4001, center: float = 0.0, half_width: float | None = None) -> np.ndarray:
    """Uniform nodes over ``center +/- 10`` stationary standard deviations."""
    if half_width is None:
        half_width = 10.0 * np.sqrt(params.stationary_var)
    return np.linspace(center - half_width, center + half_width, nodes)


@lru_cache(maxsize=2)
def _kernel(lo: float, h: float, n: int, rho: float, sigma: float) -> np.ndarray:
    """``K[i, k] = N(x_i; rho u_k, sigma^2) * w_k`` (trapezoid weight on ``u``)."""
    nodes = lo + h * np.arange(n)
    w = trapezoid_weights(nodes)
    out = np.empty((n, n))
    c = 1.0 / np.sqrt(2 * np.pi * sigma**2)
    # row blocks keep the temporaries small
    for start in range(0, n, 512):
        xi = nodes[start : start + 512, None]
        out[start : start + 512] = c * np.exp(-((xi - rho * nodes[None, :]) ** 2) / (2 * sigma**2)) * w
    out.setflags(write=False)
    return out


def predict_grid(prior: GridDensity, params: SvmParams, nodes: np.ndarray | None = None) -> np.ndarray:
    """Predictive density ``integral N(x; rho u, sigma^2) prior(u) du`` on the prior's nodes.

    With ``nodes`` given (a uniform extension of the prior's grid), the prior is
    padded with zeros to the new nodes first.
    """
    if nodes is None:
        nodes = prior.nodes
        vals = prior.values
    else:
        vals = np.interp(nodes, prior.nodes, prior.values, left=0.0, right=0.0)
    h = float(nodes[1] - nodes[0])
    K = _kernel(float(nodes[0]), h, nodes.size, float(params.rho), float(params.sigma))
    return K @ vals


def _extend(nodes: np.ndarray, left: bool, right: bool, frac: float = 0.25) -> np.ndarray:
    h = nodes[1] - nodes[0]
    add = max(int(frac * nodes.size), 1)
    lo = nodes[0] - (add * h if left else 0.0)
    n = nodes.size + (add if left else 0) + (add if right else 0)
    return lo + h * np.arange(n)


def bayes_step(prior: GridDensity, y: float, params: SvmParams, extend: bool = True) -> GridDensity:
    """One exact prediction + correction step on the grid.

    The grid grows (same spacing) while the posterior carries more than
    ``TAIL_MASS`` in the outer 2% of nodes on either side.
    """
    if params.sigma <= 0:
        raise ValueError("the grid filter needs sigma > 0")
    nodes = prior.nodes
    for _ in range(MAX_EXTENSIONS + 1):
        pred = predict_grid(prior, params, nodes)
        with np.errstate(divide="ignore"):
            logpost = np.log(pred) + params.log_likelihood(y, nodes)
        top = np.max(logpost)
        if not np.isfinite(top):
            raise FinFiltError(
                f"posterior vanishes on the whole grid: observation y={y:g} is incompatible with the prior"
            )
        post = np.exp(logpost - top)
        w = trapezoid_weights(nodes)
        mass = w @ post
        edge = max(nodes.size // 50, 2)
        left = (w[:edge] @ post[:edge]) / mass > TAIL_MASS
        right = (w[-edge:] @ post[-edge:]) / mass > TAIL_MASS
        if not extend or not (left or right):
            return GridDensity(nodes, post / mass)
        nodes = _extend(nodes, left, right)
    raise FinFiltError("posterior grid kept growing; tails are too heavy for the grid filter")


def run_oracle(observations: Sequence[float], params: SvmParams, initial: GridDensity) -> list[GridDensity]:
    out = []
    d = initial
    for y in observations:
        d = bayes_step(d, float(y), params)
        out.append(d)
    return out


def volatility_from_grid(d: GridDensity, params: SvmParams) -> float:
    return float(d.expect([lambda x: np.exp(0.5 * (x + params.gamma))])[0])
