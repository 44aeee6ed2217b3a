"""K-factor Cox-Ingersoll-Ross term-structure model.

Factors follow ``dX = k (theta - X) dt + sigma sqrt(X) dW`` under the
objective measure; bond pricing uses the risk-neutral speed ``k + lambda``.
Yields are affine in the factors, ``y(T) = chi(T) + Psi(T) . x``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FellerWarning


def _vec(values, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class CirParams:
    """Per-factor ``k, theta, sigma, lam`` plus measurement noise ``delta``.

    ``delta`` holds one standard deviation per maturity slot; a single value
    is broadcast to every maturity.
    """

    k: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        k = _vec(self.k, "k")
        theta = _vec(self.theta, "theta")
        sigma = _vec(self.sigma, "sigma")
        lam = _vec(self.lam, "lam")
        delta = _vec(self.delta, "delta")
        if not (k.size == theta.size == sigma.size == lam.size):
            raise ValueError("k, theta, sigma and lam must have one entry per factor")
        for name, arr in (("k", k), ("theta", theta), ("sigma", sigma), ("delta", delta)):
            if np.any(arr <= 0):
                raise ValueError(f"{name} must be strictly positive")
        for name, arr in (("k", k), ("theta", theta), ("sigma", sigma), ("lam", lam), ("delta", delta)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not np.all(self.feller):
            bad = np.flatnonzero(~self.feller).tolist()
            warnings.warn(f"Feller condition 2 k theta >= sigma^2 fails for factors {bad}", FellerWarning, stacklevel=2)

    @property
    def factors(self) -> int:
        return self.k.size

    @property
    def feller(self) -> np.ndarray:
        return 2 * self.k * self.theta >= self.sigma**2

    @property
    def h(self) -> np.ndarray:
        return (self.k + self.lam) ** 2 + 2 * self.sigma**2

    @property
    def stationary_var(self) -> np.ndarray:
        return self.sigma**2 * self.theta / (2 * self.k)

    def delta_for(self, n: int) -> np.ndarray:
        """Noise standard deviations for an observation with ``n`` maturities."""
        if self.delta.size == 1:
            return np.full(n, self.delta[0])
        if n > self.delta.size:
            raise ValueError(f"observation has {n} maturities but delta has only {self.delta.size} entries")
        return self.delta[:n].copy()

    def to_dict(self) -> dict:
        return {
            "k": self.k.tolist(),
            "theta": self.theta.tolist(),
            "sigma": self.sigma.tolist(),
            "lambda": self.lam.tolist(),
            "delta": self.delta.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CirParams":
        lam = data.get("lambda", data.get("lam"))
        if lam is None:
            raise ValueError("missing 'lambda'")
        return cls(data["k"], data["theta"], data["sigma"], lam, data["delta"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CirParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class YieldObservation:
    t: float
    maturities: np.ndarray
    yields: np.ndarray

    def __post_init__(self):
        mat = _vec(self.maturities, "maturities")
        y = _vec(self.yields, "yields")
        if mat.shape != y.shape:
            raise ValueError("maturities and yields must have equal length")
        if np.any(mat <= 0):
            raise ValueError("maturities must be positive")
        if np.any(np.diff(mat) <= 0):
            raise ValueError("maturities must be strictly increasing")
        object.__setattr__(self, "maturities", mat)
        object.__setattr__(self, "yields", y)

    @property
    def size(self) -> int:
        return self.maturities.size


@dataclass(frozen=True)
class FactorState:
    x: np.ndarray

    def __post_init__(self):
        x = _vec(self.x, "x")
        if np.any(x < 0):
            raise ValueError("factor values must be non-negative")
        object.__setattr__(self, "x", x)


def _factor_args(params: CirParams, j):
    kappa = params.k[j] + params.lam[j]
    return kappa, np.sqrt(kappa**2 + 2 * params.sigma[j] ** 2)


def _pieces(kappa, s, T):
    """``a = 1 - e^{-sT}``, ``e = e^{-sT}`` and ``D = 2 s e + (kappa + s) a``.

    Dividing numerator and denominator of the closed forms by ``e^{sT}``
    keeps every term bounded for large maturities.
    """
    e = np.exp(-s * T)
    a = -np.expm1(-s * T)
    return a, e, 2 * s * e + (kappa + s) * a


def _log_bracket(kappa, s, T):
    """``log(2 s) + (kappa - s) T / 2 - log D`` without cancellation at small ``T``."""
    a = -np.expm1(-s * T)
    return 0.5 * (kappa - s) * T - np.log1p(a * (kappa - s) / (2 * s))


def psi_fn(params: CirParams, j: int, T) -> np.ndarray:
    """Factor loading of ``-log P(T)``: ``2 (e^{sT} - 1) / (2 s + (kappa + s)(e^{sT} - 1))``."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("maturity must be positive")
    kappa, s = _factor_args(params, j)
    a, _, d = _pieces(kappa, s, T)
    return 2 * a / d


def log_phi(params: CirParams, j: int, T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("maturity must be positive")
    kappa, s = _factor_args(params, j)
    expo = 2 * params.k[j] * params.theta[j] / params.sigma[j] ** 2
    return expo * _log_bracket(kappa, s, T)


def phi(params: CirParams, j: int, T) -> np.ndarray:
    return np.exp(log_phi(params, j, T))


def loadings(params: CirParams, maturities) -> tuple[np.ndarray, np.ndarray]:
    """``chi`` (length n) and ``Psi`` (n x K) for a vector of maturities."""
    T = _vec(maturities, "maturities")
    if np.any(T <= 0):
        raise ValueError("maturities must be positive")
    K = params.factors
    chi = np.zeros(T.size)
    Psi = np.empty((T.size, K))
    for j in range(K):
        chi -= log_phi(params, j, T) / T
        Psi[:, j] = psi_fn(params, j, T) / T
    return chi, Psi


def model_yield(params: CirParams, x, T):
    """Model yield ``chi + Psi . x`` at maturity ``T`` (scalar or vector)."""
    state = x if isinstance(x, FactorState) else FactorState(x)
    if state.x.size != params.factors:
        raise ValueError(f"expected {params.factors} factors, got {state.x.size}")
    scalar = np.ndim(T) == 0
    chi, Psi = loadings(params, T)
    y = chi + Psi @ state.x
    return float(y[0]) if scalar else y


def loading_jacobians(params: CirParams, maturities) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Derivatives of ``chi`` and ``Psi`` with respect to each factor's parameters.

    Returns ``{name: (dchi, dPsi)}`` for ``name`` in ``k, theta, sigma, lam``;
    ``dchi[:, j]`` and ``dPsi[:, j]`` differentiate by that parameter of
    factor ``j`` (``Psi[:, j]`` is the only column that depends on it).
    """
    T = _vec(maturities, "maturities")
    K = params.factors
    out = {name: (np.zeros((T.size, K)), np.zeros((T.size, K))) for name in ("k", "theta", "sigma", "lam")}
    for j in range(K):
        k, th, sg = params.k[j], params.theta[j], params.sigma[j]
        kappa, s = _factor_args(params, j)
        a, e, d = _pieces(kappa, s, T)
        # partials at fixed s and at fixed kappa
        d_kappa = a
        d_s = 2 * e - 2 * s * T * e + a + (kappa + s) * T * e
        psi_kappa = -2 * a * d_kappa / d**2
        psi_s = 2 * T * e / d - 2 * a * d_s / d**2
        L = _log_bracket(kappa, s, T)
        L_kappa = 0.5 * T - d_kappa / d
        L_s = 1 / s - 0.5 * T - d_s / d
        ds_dkappa = kappa / s
        ds_dsigma = 2 * sg / s
        psi_dk = psi_kappa + psi_s * ds_dkappa
        L_dk = L_kappa + L_s * ds_dkappa
        psi_dsig = psi_s * ds_dsigma
        L_dsig = L_s * ds_dsigma
        c = 2 * k * th / sg**2
        logphi_d = {
            "k": 2 * th / sg**2 * L + c * L_dk,
            "lam": c * L_dk,
            "theta": 2 * k / sg**2 * L,
            "sigma": -2 * c / sg * L + c * L_dsig,
        }
        psi_d = {"k": psi_dk, "lam": psi_dk, "theta": np.zeros_like(T), "sigma": psi_dsig}
        for name in out:
            out[name][0][:, j] = -logphi_d[name] / T
            out[name][1][:, j] = psi_d[name] / T
    return out


def _generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed).spawn(stream + 1)[stream]))


def transition_sample(rng: np.random.Generator, x, k, theta, sigma, dt, size=None):
    """Exact draw of ``X[t+dt]`` given ``X[t] = x`` for one CIR factor.

    Scaled non-central chi-square sampled as a Poisson mixture of gammas:
    ``X = c * Gamma(d/2 + N, 2)`` with ``N ~ Poisson(nc / 2)``.
    """
    decay = np.exp(-k * dt)
    c = sigma**2 * (-np.expm1(-k * dt)) / (4 * k)
    dof = 4 * k * theta / sigma**2
    nc = np.asarray(x, dtype=float) * decay / c
    n = rng.poisson(0.5 * nc, size=size)
    return c * rng.gamma(0.5 * dof + n, 2.0, size=size)


def conditional_moments(params: CirParams, x, dt: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Exact conditional mean and variance of each factor after ``dt``."""
    x = np.asarray(x, dtype=float)
    decay = np.exp(-params.k * dt)
    one = -np.expm1(-params.k * dt)
    mean = params.theta * one + decay * x
    var = params.sigma**2 * one / params.k * (params.theta * one / 2 + decay * x)
    return mean, var


def simulate_factors(params: CirParams, x0, dt: float, n: int, seed: int = 0) -> np.ndarray:
    """Exact factor path of shape ``(n + 1, K)`` starting at ``x0``.

    Each factor draws from its own counter-based stream.  A factor with
    ``sigma`` below ``1e-12`` follows the deterministic mean ODE.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n < 0:
        raise ValueError("n must be non-negative")
    x0 = (x0 if isinstance(x0, FactorState) else FactorState(x0)).x
    if x0.size != params.factors:
        raise ValueError(f"expected {params.factors} factors, got {x0.size}")
    path = np.empty((n + 1, params.factors))
    path[0] = x0
    for j in range(params.factors):
        rng = _generator(seed, j)
        k, th, sg = params.k[j], params.theta[j], params.sigma[j]
        decay = np.exp(-k * dt)
        for t in range(1, n + 1):
            prev = path[t - 1, j]
            if sg < 1e-12:
                path[t, j] = th + (prev - th) * decay
            else:
                path[t, j] = transition_sample(rng, prev, k, th, sg, dt)
    return path


def observe_yields(params: CirParams, x, maturities, seed: int = 0, t: float = 0.0, stream: int = 0) -> YieldObservation:
    """Noisy yields ``Y_i = y(T_i) + delta_i eps_i``.

    ``stream`` selects an independent noise stream under the same seed,
    so a panel can give each date its own stream.
    """
    mat = _vec(maturities, "maturities")
    y = model_yield(params, x, mat)
    delta = params.delta_for(mat.size)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x59]).spawn(stream + 1)[stream]))
    return YieldObservation(t=t, maturities=mat, yields=y + delta * rng.standard_normal(mat.size))


def simulate_panel(
    params: CirParams,
    n: int,
    maturities: Sequence[float],
    dt: float = 1.0,
    x0=None,
    seed: int = 0,
) -> tuple[np.ndarray, list[YieldObservation]]:
    """Factor path and yield panel at times ``dt, 2 dt, ..., n dt``.

    ``x0`` defaults to the long-run mean ``theta``.
    """
    start = params.theta if x0 is None else x0
    path = simulate_factors(params, start, dt, n, seed=seed)
    panel = [observe_yields(params, path[t], maturities, seed=seed, t=t * dt, stream=t) for t in range(1, n + 1)]
    return path, panel
