"""Log-AR(1) stochastic volatility model and its EP(m) projection filter.

Model::

    X[t+1] = rho * X[t] + sigma * W[t+1]
    Y[t]   = exp((X[t] + gamma) / 2) * V[t]

The projection filter keeps the conditional law of ``X`` inside EP(m).  Each
step pushes the current EP(m) density through the transition and the
observation likelihood, integrates the powers ``x**j`` of the result
(``j = 0..K`` with ``K = m`` or ``2m``), and converts the moments back into
canonical parameters.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import FilterStepError, FinFiltError
from .expfam import (
    ExpFamilyDensity,
    MomentVector,
    _effective,
    gaussian_theta,
    kl_project,
    log_normalizer,
    moments_from_theta,
    theta_from_moments_algebraic,
    theta_from_moments_iterative,
)
from .quadrature import exp_poly_integrals, log_density_integrals, poly_eval

logger = logging.getLogger(__name__)

Mode = Literal["m", "2m"]


@dataclass(frozen=True)
class SvmParams:
    rho: float
    sigma: float
    gamma: float

    def __post_init__(self):
        for name in ("rho", "sigma", "gamma"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if abs(self.rho) >= 1:
            warnings.warn(f"|rho| = {abs(self.rho):g} >= 1: state process is not stationary", stacklevel=2)

    @property
    def stationary_var(self) -> float:
        if abs(self.rho) >= 1:
            raise ValueError("no stationary distribution for |rho| >= 1")
        return self.sigma**2 / (1.0 - self.rho**2)

    def log_likelihood(self, y: float, x):
        """``log N(y; 0, exp(x + gamma))`` as a function of the state."""
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore"):
            return -0.5 * np.log(2 * np.pi) - 0.5 * (x + self.gamma) - 0.5 * y * y * np.exp(-x - self.gamma)


@dataclass(frozen=True)
class SvmPath:
    x: np.ndarray
    y: np.ndarray
    seed: int


def _generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed).spawn(stream + 1)[stream]))


def simulate_svm(params: SvmParams, n: int, x0=None, seed: int = 0) -> SvmPath:
    """Simulate ``n`` periods of ``(X, Y)``.

    ``x0`` is a number (deterministic start), an :class:`ExpFamilyDensity`
    to draw from, or ``None`` for the stationary Gaussian.  The initial state,
    the state noise and the observation noise use separate counter-based
    streams, so changing ``gamma`` leaves every draw unchanged.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng_x0, rng_w, rng_v = (_generator(seed, k) for k in range(3))
    if x0 is None:
        start = rng_x0.normal(0.0, np.sqrt(params.stationary_var))
    elif isinstance(x0, ExpFamilyDensity):
        start = float(x0.sample(rng_x0, 1)[0])
    else:
        start = float(x0)
    w = rng_w.standard_normal(n)
    v = rng_v.standard_normal(n)
    x = np.empty(n)
    x[0] = start
    for t in range(1, n):
        x[t] = params.rho * x[t - 1] + params.sigma * w[t]
    y = np.exp(0.5 * (x + params.gamma)) * v
    return SvmPath(x=x, y=y, seed=seed)


@dataclass(frozen=True)
class ProjFilterState:
    """Projection filter state at one time.

    ``alpha = exp(log_alpha0) * (1, eta_1, ..., eta_K)`` are the unnormalised
    expectation parameters; the scale is carried in log form so that long
    runs neither overflow nor underflow.
    """

    time: int
    log_alpha0: float
    eta: np.ndarray
    theta: np.ndarray
    order: int
    mode: Mode = "2m"

    @property
    def alpha(self) -> MomentVector:
        return MomentVector(np.exp(self.log_alpha0) * np.concatenate([[1.0], self.eta]), normalized=False)

    @property
    def density(self) -> ExpFamilyDensity:
        return ExpFamilyDensity(self.theta)

    def consistency_residual(self) -> float:
        m = self.order
        return float(np.max(np.abs(moments_from_theta(self.theta, m).values - self.eta[:m])))

    def to_record(self, vol_estimate: float | None = None) -> dict:
        rec = {"t": self.time, "eta": self.eta.tolist(), "theta": self.theta.tolist()}
        if vol_estimate is not None:
            rec["vol_estimate"] = vol_estimate
        return rec


def _moment_count(order: int, mode: Mode) -> int:
    if mode not in ("m", "2m"):
        raise ValueError(f"mode must be 'm' or '2m', got {mode!r}")
    return order if mode == "m" else 2 * order


def initial_state(initial: ExpFamilyDensity | None, order: int = 2, mode: Mode = "2m") -> ProjFilterState:
    """Filter state at time 0 with ``alpha_0 = 1`` and ``alpha_i = eta_i(0)``.

    ``None`` means the diffuse default ``N(0, 10)``.  A density of lower order
    is embedded with zero higher coefficients; one of higher order is
    projected onto EP(order).
    """
    if order < 2 or order % 2:
        raise ValueError("order must be even and >= 2")
    if initial is None:
        theta = gaussian_theta(0.0, 10.0, order)
    elif initial.order <= order:
        theta = np.concatenate([initial.theta, np.zeros(order - initial.order)])
    else:
        theta = kl_project(initial, order).theta
    k = _moment_count(order, mode)
    eta = moments_from_theta(theta, k).values
    return ProjFilterState(time=0, log_alpha0=0.0, eta=eta, theta=theta, order=order, mode=mode)


def _predictive_log_density(theta: np.ndarray, params: SvmParams):
    """``x -> log of the integral of exp(-(x - rho u)^2 / (2 sigma^2) + theta . c(u)) du``,
    minus ``psi(theta)``.

    Leaving ``psi`` out of the pointwise values matters for narrow priors,
    where ``psi`` is large and would round away the variation in ``x``.
    """
    eff = _effective(theta)
    m = eff.size
    rho, s2 = params.rho, params.sigma**2

    psi = log_normalizer(eff)
    if m == 2:
        # Gaussian prior N(mu, v): the integral is exp(psi) sqrt(2 pi sigma^2)
        # times the predictive N(rho mu, rho^2 v + sigma^2) density
        v = -0.5 / eff[1]
        mu = eff[0] * v
        pred_var = rho * rho * v + s2
        const = 0.5 * np.log(s2 / pred_var)

        def gaussian_inner(x: np.ndarray) -> np.ndarray:
            x = np.asarray(x, dtype=float)
            return const - (x - rho * mu) ** 2 / (2 * pred_var)

        return gaussian_inner, m

    def inner(x: np.ndarray) -> np.ndarray:
        shape = np.shape(x)
        xs = np.ravel(x)
        coefs = np.tile(eff, (xs.size, 1))
        coefs[:, 0] += rho * xs / s2
        coefs[:, 1] -= rho * rho / (2 * s2)

        def logf(u: np.ndarray) -> np.ndarray:
            return -((xs[:, None] - rho * u) ** 2) / (2 * s2) + poly_eval(eff[None, :], u)

        return exp_poly_integrals(coefs, logf=logf).log_mass.reshape(shape) - psi

    return inner, m


def projection_step(state: ProjFilterState, y: float, params: SvmParams, refine: bool = True) -> ProjFilterState:
    """Advance the projection filter by one observation.

    Computes the unnormalised moments of the one-step posterior, then recovers
    ``theta`` by Newton moment matching from the previous ``theta`` (mode
    ``"m"``) or by the algebraic Hankel solve on ``2m`` moments, followed by
    Newton refinement unless ``refine`` is false (mode ``"2m"``).
    """
    if params.sigma <= 0:
        raise ValueError("the filter needs sigma > 0")
    t = state.time + 1
    m = state.order
    k = _moment_count(m, state.mode)
    theta = state.theta
    inner, _ = _predictive_log_density(theta, params)
    gamma = params.gamma

    def log_integrand(x):
        with np.errstate(over="ignore"):
            lik = -0.5 * (x + gamma) - 0.5 * y * y * np.exp(-x - gamma)
        return lik + inner(x) + state.log_alpha0

    prior_mean = state.eta[0]
    prior_var = max(state.eta[1] - prior_mean**2, 0.0)
    center = params.rho * prior_mean
    scale = np.sqrt(params.rho**2 * prior_var + params.sigma**2)
    try:
        res = log_density_integrals(log_integrand, center, scale, max_power=k)
    except FinFiltError as exc:
        raise FilterStepError(f"posterior quadrature failed: {exc}", step=t) from exc
    eta = res.moments[0]
    new_theta = _recover_theta(eta, theta, m, state.mode, refine, t)
    return ProjFilterState(
        time=t, log_alpha0=float(res.log_mass[0]), eta=eta, theta=new_theta, order=m, mode=state.mode
    )


def _recover_theta(eta, prev_theta, m, mode, refine, t) -> np.ndarray:
    starts = []
    if mode == "2m":
        try:
            alg = theta_from_moments_algebraic(MomentVector(eta[: 2 * m]))
        except FinFiltError as exc:
            logger.debug("t=%d: algebraic recovery failed (%s); Newton from previous theta", t, exc)
        else:
            if not refine:
                return alg
            starts.append(alg)
    # the Hankel solve can land on a spurious member whose mass sits in a far mode,
    # so the previous theta and the matched Gaussian are kept as fallbacks
    starts.append(prev_theta)
    var = eta[1] - eta[0] ** 2
    if var > 0:
        starts.append(gaussian_theta(eta[0], var, m))
    last = None
    for start in starts:
        try:
            return theta_from_moments_iterative(MomentVector(eta[:m]), start)
        except FinFiltError as exc:
            logger.debug("t=%d: Newton from %s failed (%s)", t, start, exc)
            last = exc
    raise FilterStepError(f"theta recovery failed: {last}", step=t) from last


def volatility_estimate(state: ProjFilterState, params: SvmParams) -> float:
    """``E[exp((X + gamma) / 2)]`` under the filter density.

    The exponential tilt is folded into the canonical parameters, so the
    integral is a ratio of normalisers.
    """
    theta = state.theta
    shifted = theta.copy()
    shifted[0] += 0.5
    return float(np.exp(0.5 * params.gamma + log_normalizer(shifted) - log_normalizer(theta)))


def run_filter(
    observations: Sequence[float],
    params: SvmParams,
    order: int = 2,
    mode: Mode = "2m",
    initial: ExpFamilyDensity | None = None,
    refine: bool = True,
) -> list[tuple[ProjFilterState, float]]:
    """Fold :func:`projection_step` over ``observations``.

    ``initial`` is the law of the state one period before the first
    observation.  On failure a :class:`FilterStepError` carries the step
    index and the output produced so far in ``partial``.
    """
    obs = np.asarray(observations, dtype=float)
    if obs.size == 0:
        raise ValueError("observations must be non-empty")
    state = initial_state(initial, order, mode)
    out: list[tuple[ProjFilterState, float]] = []
    for i, y in enumerate(obs):
        try:
            state = projection_step(state, float(y), params, refine=refine)
            vol = volatility_estimate(state, params)
        except FilterStepError as exc:
            raise FilterStepError(str(exc).split(": ", 1)[-1], step=i + 1, partial=out) from exc
        except FinFiltError as exc:
            raise FilterStepError(str(exc), step=i + 1, partial=out) from exc
        out.append((state, vol))
    return out
