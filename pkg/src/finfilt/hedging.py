"""Risk-minimising hedging of a European claim under regime-switching volatility.

The price ``S`` is a martingale with volatility ``sigma(Z)`` driven by a
continuous-time Markov chain ``Z`` with intensity matrix ``Lambda``.  The
conditional claim value ``u_t(x, i) = E[H | S_t = x, Z_t = i]`` solves the
coupled backward system

    u_t + 0.5 sigma(i)^2 x^2 u_xx + sum_j Lambda[i, j] u(., j) = 0,  u_T = H.

Under full observation the risk-minimising stock holding is ``u_x``; under
partial observation it is a ``sigma^2 S^2``-weighted conditional average of
``u_x``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
from scipy import sparse
from scipy.linalg import expm
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegimeModel:
    sigma: np.ndarray
    lambda_matrix: np.ndarray
    horizon: float

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        lam = np.atleast_2d(np.asarray(self.lambda_matrix, dtype=float))
        R = sigma.size
        if sigma.ndim != 1 or np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("sigma must be a vector of positive reals")
        if lam.shape != (R, R):
            raise ValueError(f"lambda_matrix must be {R}x{R}")
        off = lam - np.diag(np.diag(lam))
        if np.any(off < 0):
            raise ValueError("off-diagonal intensities must be non-negative")
        if np.max(np.abs(lam.sum(axis=1))) > 1e-10 * max(1.0, float(np.max(np.abs(lam)))):
            raise ValueError("intensity matrix rows must sum to zero")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lambda_matrix", lam)
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def regimes(self) -> int:
        return self.sigma.size

    def transition(self, dt: float) -> np.ndarray:
        return expm(self.lambda_matrix * dt)

    def to_dict(self) -> dict:
        return {"sigma": self.sigma.tolist(), "lambda": self.lambda_matrix.tolist(), "T": self.horizon}

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeModel":
        sigma = np.atleast_1d(np.asarray(data["sigma"], dtype=float))
        lam = data.get("lambda", np.zeros((sigma.size, sigma.size)))
        return cls(sigma, lam, data["T"])


@dataclass(frozen=True)
class Claim:
    """European payoff ``call``, ``put`` or ``identity`` (``H(x) = x``)."""

    payoff: Literal["call", "put", "identity"]
    strike: float = 0.0

    def __post_init__(self):
        if self.payoff not in ("call", "put", "identity"):
            raise ValueError(f"unknown payoff {self.payoff!r}")
        if self.payoff != "identity" and not self.strike > 0:
            raise ValueError("strike must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.payoff == "call":
            return np.maximum(x - self.strike, 0.0)
        if self.payoff == "put":
            return np.maximum(self.strike - x, 0.0)
        return x.copy()


@dataclass(frozen=True)
class GridSpec:
    n_space: int = 400
    n_time: int = 400
    s_max: float | None = None
    rannacher_steps: int = 2

    def __post_init__(self):
        if self.n_space < 4 or self.n_time < 1:
            raise ValueError("grid needs n_space >= 4 and n_time >= 1")
        if self.s_max is not None and not self.s_max > 0:
            raise ValueError("s_max must be positive")


@dataclass(frozen=True)
class ClaimSolution:
    """``u[n, i, k]`` and ``xi[n, i, k]`` at time ``times[n]``, regime ``i``, price ``prices[k]``."""

    model: RegimeModel
    payoff: Callable
    times: np.ndarray
    prices: np.ndarray
    u: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        for arr in (self.times, self.prices, self.u, self.xi):
            arr.setflags(write=False)

    def lookup(self, t, s, regime) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised ``(u, xi)`` at times ``t``, prices ``s`` and regimes ``regime``.

        Prices are interpolated by cubic Hermite polynomials built from the
        nodal values and slopes, times linearly.  At the horizon the payoff
        itself is the value, since ``u_T = H`` holds off the nodes as well.
        """
        t, s, regime = np.broadcast_arrays(
            np.asarray(t, dtype=float), np.asarray(s, dtype=float), np.asarray(regime, dtype=int)
        )
        if np.any(s < self.prices[0]) or np.any(s > self.prices[-1]):
            raise ValueError(f"price outside the grid [{self.prices[0]:g}, {self.prices[-1]:g}]")
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise ValueError("time outside the solution horizon")
        if np.any((regime < 0) | (regime >= self.model.regimes)):
            raise ValueError("regime index out of range")
        dt = self.times[1] - self.times[0]
        pos = np.clip((t - self.times[0]) / dt, 0.0, self.times.size - 1)
        n0 = np.minimum(np.floor(pos).astype(int), self.times.size - 2)
        wt = pos - n0
        u0, x0 = self._hermite(n0, regime, s)
        u1, x1 = self._hermite(n0 + 1, regime, s)
        u = (1 - wt) * u0 + wt * u1
        xi = (1 - wt) * x0 + wt * x1
        at_end = np.abs(t - self.times[-1]) <= 1e-12
        if np.any(at_end):
            u = np.where(at_end, np.asarray(self.payoff(s), dtype=float), u)
        return u, xi

    def _hermite(self, n, i, s):
        h = self.prices[1] - self.prices[0]
        k = np.clip(((s - self.prices[0]) / h).astype(int), 0, self.prices.size - 2)
        z = (s - self.prices[k]) / h
        ua, ub = self.u[n, i, k], self.u[n, i, k + 1]
        da, db = self.xi[n, i, k] * h, self.xi[n, i, k + 1] * h
        z2, z3 = z * z, z * z * z
        value = (2 * z3 - 3 * z2 + 1) * ua + (z3 - 2 * z2 + z) * da + (-2 * z3 + 3 * z2) * ub + (z3 - z2) * db
        slope = ((6 * z2 - 6 * z) * ua + (3 * z2 - 4 * z + 1) * da + (-6 * z2 + 6 * z) * ub + (3 * z2 - 2 * z) * db) / h
        return value, slope


def default_s_max(model: RegimeModel, reference: float) -> float:
    """Six volatility-horizon standard deviations above ``reference`` in log terms."""
    return float(reference * np.exp(6.0 * np.max(model.sigma) * np.sqrt(model.horizon)))


def _generator(model: RegimeModel, s: np.ndarray) -> sparse.csc_matrix:
    """Spatial operator for all regimes stacked: diffusion blocks plus ``Lambda`` coupling.

    At ``S = 0`` the diffusion vanishes; at ``s_max`` the claim is taken
    linear (``u_SS = 0``), so only the coupling acts on both edges.
    """
    N = s.size
    h = s[1] - s[0]
    R = model.regimes
    blocks = []
    for i in range(R):
        c = 0.5 * model.sigma[i] ** 2 * s**2 / h**2
        c[0] = c[-1] = 0.0
        lower = c[1:]
        upper = c[:-1]
        blocks.append(sparse.diags([lower, -2 * c, upper], [-1, 0, 1], shape=(N, N)))
    diffusion = sparse.block_diag(blocks)
    coupling = sparse.kron(sparse.csr_matrix(model.lambda_matrix), sparse.identity(N))
    return sparse.csc_matrix(diffusion + coupling)


def solve_claim_pde(model: RegimeModel, payoff: Callable, grid: GridSpec | None = None, reference: float | None = None) -> ClaimSolution:
    """Backward Crank-Nicolson solve of the regime-coupled pricing system.

    The price axis is uniform on ``[0, s_max]``, the coupling is implicit
    and the whole block system is factorised once.  The first steps are
    split into implicit Euler half steps to damp the payoff kink.
    ``reference`` (e.g. the strike) sets the default ``s_max``, which is
    stretched slightly so that ``reference`` falls on a node: a kink between
    nodes makes the error erratic under refinement.
    """
    grid = grid or GridSpec()
    if reference is None:
        reference = getattr(payoff, "strike", 0.0) or 1.0
    if grid.s_max is not None:
        s_max = grid.s_max
    else:
        s_max = default_s_max(model, reference)
        s_max = reference / max(1, round(reference * grid.n_space / s_max)) * grid.n_space
    s = np.linspace(0.0, s_max, grid.n_space + 1)
    h = s[1] - s[0]
    if h > 0.05 * reference or grid.n_time < 20:
        warnings.warn(
            f"coarse grid (dS={h:g}, {grid.n_time} time steps): expect accuracy loss near {reference:g}",
            RuntimeWarning,
            stacklevel=2,
        )
    R, N = model.regimes, s.size
    times = np.linspace(0.0, model.horizon, grid.n_time + 1)
    dtau = model.horizon / grid.n_time
    A = _generator(model, s)
    eye = sparse.identity(R * N, format="csc")
    cn_lhs = splu(sparse.csc_matrix(eye - 0.5 * dtau * A))
    cn_rhs = sparse.csr_matrix(eye + 0.5 * dtau * A)
    start = min(grid.rannacher_steps, grid.n_time)
    terminal = np.asarray(payoff(s), dtype=float)
    if terminal.shape != s.shape or not np.all(np.isfinite(terminal)):
        raise ValueError("payoff must map the price grid to finite values")
    u = np.empty((times.size, R, N))
    u[-1] = terminal
    vec = np.tile(terminal, R)
    for n in range(grid.n_time - 1, -1, -1):
        if grid.n_time - n <= start:
            # two implicit Euler half steps share the Crank-Nicolson factorisation
            vec = cn_lhs.solve(cn_lhs.solve(vec))
        else:
            vec = cn_lhs.solve(cn_rhs @ vec)
        u[n] = vec.reshape(R, N)
    xi = np.gradient(u, h, axis=2, edge_order=2)
    return ClaimSolution(model, payoff, times, s, u, xi)


def strategy_full(sol: ClaimSolution, s: float, i: int, t: float) -> tuple[float, float]:
    """Stock and cash holdings ``(xi, eta)`` when price and regime are observed."""
    u, xi = sol.lookup(t, s, i)
    return float(xi), float(u - xi * s)


@dataclass(frozen=True)
class ConditionalDistribution:
    """Weighted atoms ``(price, regime, weight)`` for the law of ``(S_t, Z_t)`` given the observations."""

    prices: np.ndarray
    regimes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.prices, dtype=float))
        z = np.atleast_1d(np.asarray(self.regimes, dtype=int))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if not (s.shape == z.shape == w.shape) or s.ndim != 1 or s.size == 0:
            raise ValueError("prices, regimes and weights must be 1-D of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(s < 0):
            raise ValueError("prices must be non-negative")
        object.__setattr__(self, "prices", s)
        object.__setattr__(self, "regimes", z)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point(cls, s: float, i: int) -> "ConditionalDistribution":
        return cls([s], [i], [1.0])


def strategy_partial(
    sol: ClaimSolution, dist: ConditionalDistribution, t: float, observed_price: float | None = None
) -> tuple[float, float]:
    """Stock holding ``E[xi^H sigma^2 S^2 | Y] / E[sigma^2 S^2 | Y]`` and cash ``E[H | Y] - xi S``.

    ``S`` in the cash term is ``observed_price`` when given, otherwise the
    conditional mean price.
    """
    weight = dist.weights * sol.model.sigma[dist.regimes] ** 2 * dist.prices**2
    total = weight.sum()
    if not total > 0:
        raise ValueError("conditional distribution puts no mass on positive prices")
    u, xi = sol.lookup(t, dist.prices, dist.regimes)
    xi_y = float(weight @ xi / total)
    value = float(dist.weights @ u)
    price = float(dist.weights @ dist.prices) if observed_price is None else float(observed_price)
    return xi_y, value - xi_y * price


@dataclass(frozen=True)
class CostStatistics:
    mean: float
    var: float
    std_error: float
    max_replication_error: float
    n_paths: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "var": self.var,
            "std_error": self.std_error,
            "max_replication_error": self.max_replication_error,
            "n_paths": self.n_paths,
        }


def simulate_paths(model: RegimeModel, s0: float, n_paths: int, n_steps: int, seed: int = 0, z0=0):
    """Price and regime paths under the martingale measure.

    Within a step the regime is frozen and the price moves log-normally;
    regimes jump by the exact ``expm(Lambda dt)`` transition.  ``z0`` is a
    regime index or a probability vector.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    R = model.regimes
    dt = model.horizon / n_steps
    P = model.transition(dt)
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    if np.ndim(z0) == 0:
        z = np.full(n_paths, int(z0))
    else:
        p0 = np.asarray(z0, dtype=float)
        z = np.searchsorted(np.cumsum(p0), rng.random(n_paths) * p0.sum(), side="right")
        z = np.minimum(z, R - 1)
    S = np.empty((n_steps + 1, n_paths))
    Z = np.empty((n_steps + 1, n_paths), dtype=int)
    S[0], Z[0] = s0, z
    for n in range(n_steps):
        sg = model.sigma[Z[n]]
        S[n + 1] = S[n] * np.exp(-0.5 * sg**2 * dt + sg * np.sqrt(dt) * rng.standard_normal(n_paths))
        u = rng.random(n_paths)
        Z[n + 1] = np.minimum((u[:, None] > cum[Z[n]]).sum(axis=1), R - 1)
    return S, Z


def simulate_cost_process(
    model: RegimeModel,
    sol: ClaimSolution,
    s0: float,
    n_paths: int = 10_000,
    n_steps: int = 100,
    seed: int = 0,
    strategy: Literal["full", "partial"] = "full",
    z0=0,
    regime_probs: Callable[[float, np.ndarray], np.ndarray] | None = None,
    paths: tuple[np.ndarray, np.ndarray] | None = None,
) -> CostStatistics:
    """Cost ``C = xi S + eta - int xi dS`` along simulated paths.

    ``"partial"`` observes the price but not the regime; the regime law at
    time ``t`` comes from ``regime_probs(t, prices)`` (an ``(n_paths, R)``
    array) and defaults to the unconditional ``p0 expm(Lambda t)``.  Pass
    ``paths`` to reuse the same ``(S, Z)`` for several strategies.
    """
    S, Z = paths if paths is not None else simulate_paths(model, s0, n_paths, n_steps, seed, z0)
    n_steps, n_paths = S.shape[0] - 1, S.shape[1]
    times = np.linspace(0.0, model.horizon, n_steps + 1)
    S = np.clip(S, sol.prices[0], sol.prices[-1])
    if strategy == "full":
        def holdings(n):
            u, xi = sol.lookup(times[n], S[n], Z[n])
            return xi, u - xi * S[n]
    elif strategy == "partial":
        R = model.regimes
        p0 = np.eye(R)[int(z0)] if np.ndim(z0) == 0 else np.asarray(z0, dtype=float) / np.sum(z0)

        def probs(n):
            if regime_probs is not None:
                return np.asarray(regime_probs(times[n], S[n]), dtype=float)
            return np.tile(p0 @ model.transition(times[n]), (n_paths, 1))

        def holdings(n):
            p = probs(n)
            us = np.empty((n_paths, R))
            xis = np.empty((n_paths, R))
            for i in range(R):
                us[:, i], xis[:, i] = sol.lookup(times[n], S[n], i)
            w = p * model.sigma[None, :] ** 2
            xi = (w * xis).sum(axis=1) / w.sum(axis=1)
            return xi, (p * us).sum(axis=1) - xi * S[n]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    xi, eta = holdings(0)
    value0 = xi * S[0] + eta
    gains = np.zeros(n_paths)
    for n in range(n_steps):
        gains += xi * (S[n + 1] - S[n])
        xi, eta = holdings(n + 1)
    valueT = xi * S[-1] + eta
    cost = valueT - value0 - gains
    replication = valueT - np.asarray(sol.payoff(S[-1]), dtype=float)
    var = float(np.var(cost, ddof=1)) if n_paths > 1 else 0.0
    return CostStatistics(
        mean=float(np.mean(cost)),
        var=var,
        std_error=float(np.sqrt(var / n_paths)),
        max_replication_error=float(np.max(np.abs(replication))),
        n_paths=n_paths,
    )
