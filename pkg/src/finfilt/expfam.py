"""Polynomial exponential families EP(m).

A member of EP(m) has density ``p(x, theta) = exp(theta_1 x + ... + theta_m x**m - psi(theta))``
with ``m`` even and ``theta_m < 0``.  The canonical parameters ``theta`` and
the expectation parameters ``eta_i = E[x**i] = d psi / d theta_i`` are dual
coordinates; this module converts between them, evaluates the Kullback-Leibler
divergence and projects arbitrary densities onto EP(m) by moment matching.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import linalg
from scipy.special import comb

from .errors import (
    BoundaryError,
    ConvergenceError,
    DomainError,
    FinFiltError,
    IllConditionedError,
    NearBoundaryWarning,
    QuadratureError,
)
from .quadrature import LogFn, QuadResult, exp_poly_integrals, poly_eval, taylor_shift, window_integrals

logger = logging.getLogger(__name__)

COND_LIMIT = 1e8
NEAR_BOUNDARY = 1e-8
NEWTON_TOL = 1e-9
# leading coefficient given to a nested lower-order start, in standardised units
LIFT = 1e-3


def _effective(theta: np.ndarray) -> np.ndarray:
    """Drop trailing zero coefficients (a lower-order member nested in EP(m))."""
    nz = np.nonzero(theta)[0]
    return theta[: nz[-1] + 1] if nz.size else theta[:0]


def is_valid_theta(theta) -> bool:
    """True when ``exp(theta . c(x))`` is integrable.

    The highest non-zero coefficient must multiply an even power and be
    negative; EP(k) for even ``k < m`` is thereby nested in EP(m).
    """
    eff = _effective(np.asarray(theta, dtype=float))
    return eff.size >= 2 and eff.size % 2 == 0 and eff[-1] < 0


def _check_theta(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).ravel().copy()
    m = theta.size
    if m < 2 or m % 2:
        raise ValueError(f"EP(m) needs an even order m >= 2, got {m}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("canonical parameters must be finite")
    if not is_valid_theta(theta):
        raise BoundaryError(
            f"leading coefficient theta_m = {theta[-1]:.3g} >= 0: density is not integrable",
            theta=theta,
        )
    return theta


def _integrals(theta: np.ndarray, max_power: int = 0, funcs=()) -> QuadResult:
    return exp_poly_integrals(_effective(theta)[None, :], max_power=max_power, funcs=funcs)


def log_normalizer(theta) -> float:
    """``psi(theta) = log of the integral of exp(theta . (x, ..., x**m))``."""
    theta = _check_theta(theta)
    return float(_integrals(theta).log_mass[0])


@dataclass(frozen=True)
class MomentVector:
    """Moments ``eta_1..eta_K`` (normalised) or ``alpha_0..alpha_K`` (unnormalised)."""

    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", values)
        if not self.normalized and (values.size == 0 or values[0] <= 0):
            raise ValueError("unnormalised moments need alpha_0 > 0")

    def __len__(self) -> int:
        return self.values.size

    @property
    def eta(self) -> np.ndarray:
        if self.normalized:
            return self.values
        return self.values[1:] / self.values[0]

    def to_json(self) -> dict:
        return {"values": self.values.tolist(), "normalized": self.normalized}

    @classmethod
    def from_json(cls, data: dict) -> "MomentVector":
        return cls(np.asarray(data["values"], dtype=float), bool(data.get("normalized", True)))


def moments_from_theta(theta, count: int) -> MomentVector:
    """``(E[x], ..., E[x**count])`` under ``p(., theta)``."""
    theta = _check_theta(theta)
    if count < 1:
        raise ValueError("count must be >= 1")
    return MomentVector(_integrals(theta, max_power=count).moments[0], normalized=True)


def hankel_matrix(eta, m: int) -> np.ndarray:
    """``M[i, j] = eta_{i+j}`` for ``i, j = 1..m``; needs ``eta_1..eta_{2m}``."""
    eta = np.asarray(eta, dtype=float)
    if eta.size < 2 * m:
        raise ValueError(f"need {2 * m} moments for an order-{m} Hankel matrix, got {eta.size}")
    idx = np.arange(1, m + 1)
    return eta[idx[:, None] + idx[None, :] - 1]


def fisher_information(theta, moments: np.ndarray | None = None) -> np.ndarray:
    """Covariance of ``(x, ..., x**m)`` under ``p(., theta)``: the Hessian of psi."""
    theta = np.asarray(theta, dtype=float)
    m = theta.size
    if moments is None:
        moments = moments_from_theta(theta, 2 * m).values
    full = np.concatenate([[1.0], moments])
    idx = np.arange(1, m + 1)
    cov = full[idx[:, None] + idx[None, :]] - np.outer(full[idx], full[idx])
    return 0.5 * (cov + cov.T)


def _warn_if_near_boundary(theta: np.ndarray) -> None:
    if -NEAR_BOUNDARY <= theta[-1] < 0:
        warnings.warn(
            f"theta_m = {theta[-1]:.3g} is within {NEAR_BOUNDARY:g} of the manifold boundary",
            NearBoundaryWarning,
            stacklevel=3,
        )


def _snap_negligible(theta: np.ndarray, eta: np.ndarray, rel: float = 1e-11) -> np.ndarray:
    """Zero top coefficients whose term is negligible on the density's scale.

    Exact moments of a lower-order member (a Gaussian seen from EP(4), say)
    recover the higher coefficients only up to rounding, with random sign.
    """
    theta = theta.copy()
    m = theta.size
    scale = np.sqrt(max(eta[1], 1e-300))
    for i in range(m - 1, 1, -1):
        if abs(theta[i]) * scale ** (i + 1) < rel:
            theta[i] = 0.0
        else:
            break
    return theta


def theta_from_moments_algebraic(moments, regularize: bool = False) -> np.ndarray:
    """Recover ``theta`` from ``eta_1..eta_{2m}`` by the Hankel linear system.

    Solves ``M(eta) [theta_1, 2 theta_2, ..., m theta_m] = -[2 eta_1, ..., (m+1) eta_m]``
    with a Cholesky factorisation.  The answer is exact when the moments come
    from a member of EP(m); for other densities it is a heuristic starting
    point.  Raises :class:`IllConditionedError` when ``M`` (or the full moment
    matrix including ``eta_0 = 1``) is singular or has condition number above
    ``COND_LIMIT``; pass ``regularize=True`` to add a Tikhonov shift instead.
    Raises :class:`BoundaryError` when the solution has ``theta_m >= 0``.
    """
    mv = moments if isinstance(moments, MomentVector) else MomentVector(moments)
    eta = mv.eta
    if eta.size % 2:
        raise ValueError("algebraic recovery needs an even number (2m) of moments")
    m = eta.size // 2
    if m % 2:
        raise ValueError(f"2m moments with m={m} odd: EP(m) needs even m")
    M = hankel_matrix(eta, m)
    # the moment matrix including eta_0 must be positive definite for any density
    full = np.concatenate([[1.0], eta])
    idx = np.arange(m + 1)
    H0 = full[idx[:, None] + idx[None, :]]
    d = 1.0 / np.sqrt(np.abs(np.diag(H0)))
    try:
        linalg.cholesky(H0 * d[:, None] * d[None, :])
    except linalg.LinAlgError:
        raise IllConditionedError(
            "moment matrix is not positive definite: not the moments of a density",
            condition=float("inf"),
        ) from None
    cond = float(np.linalg.cond(M))
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        if not regularize:
            raise IllConditionedError(f"Hankel matrix condition number {cond:.3g} >= {COND_LIMIT:g}", cond)
        M = M + (1e-10 * np.trace(M) / m) * np.eye(m)
    rhs = -(np.arange(2, m + 2) * eta[:m])
    try:
        scaled = linalg.cho_solve(linalg.cho_factor(M), rhs)
    except linalg.LinAlgError:
        raise IllConditionedError("Hankel matrix is not positive definite", cond) from None
    theta = _snap_negligible(scaled / np.arange(1, m + 1), eta)
    if not is_valid_theta(theta):
        raise BoundaryError(
            f"algebraic recovery gave theta_m = {theta[-1]:.3g} >= 0 (not integrable)", theta=theta
        )
    _warn_if_near_boundary(theta)
    return theta


def _standardize(eta: np.ndarray, mean: float, scale: float) -> np.ndarray:
    """Raw moments ``E[x**j]`` to moments of ``(x - mean) / scale``."""
    full = np.concatenate([[1.0], eta])
    out = np.empty(eta.size)
    for j in range(1, eta.size + 1):
        i = np.arange(j + 1)
        out[j - 1] = np.sum(comb(j, i) * full[: j + 1] * (-mean) ** (j - i)) / scale**j
    return out


def _unstandardize(eta_std: np.ndarray, mean: float, scale: float) -> np.ndarray:
    full = np.concatenate([[1.0], eta_std])
    out = np.empty(eta_std.size)
    for j in range(1, eta_std.size + 1):
        i = np.arange(j + 1)
        out[j - 1] = np.sum(comb(j, i) * full[: j + 1] * scale**i * mean ** (j - i))
    return out


def _theta_to_standard(theta: np.ndarray, mean: float, scale: float) -> np.ndarray:
    local = taylor_shift(theta[None, :], np.array([mean]))[0]
    return local * scale ** np.arange(1, theta.size + 1)


def _theta_from_standard(theta_std: np.ndarray, mean: float, scale: float) -> np.ndarray:
    coefs = theta_std / scale ** np.arange(1, theta_std.size + 1)
    return taylor_shift(coefs[None, :], np.array([-mean]))[0]


def theta_from_moments_iterative(
    moments,
    initial_theta,
    tol: float = NEWTON_TOL,
    max_iter: int = 100,
) -> np.ndarray:
    """Match ``eta_1..eta_m`` by damped Newton iteration on the canonical parameters.

    Newton is run on the convex dual ``V(theta) = psi(theta) - theta . eta``,
    whose gradient is the moment mismatch and whose Hessian is the Fisher
    matrix, in the coordinates ``(x - mean) / sd`` of the target where the
    Fisher matrix is well scaled.  A full Newton step is taken when it stays
    on the manifold and decreases ``V``; otherwise a damped step is taken in
    ``log(-theta_m)``, which cannot cross ``theta_m = 0``.  Stops when the
    largest raw-moment mismatch is below ``tol``.  Gaussian targets (m=2)
    are matched in closed form.
    """
    mv = moments if isinstance(moments, MomentVector) else MomentVector(moments)
    raw_target = mv.eta
    theta0 = _check_theta(initial_theta)
    m = theta0.size
    if raw_target.size < m:
        raise ValueError(f"need {m} moments, got {raw_target.size}")
    raw_target = raw_target[:m]
    var = raw_target[1] - raw_target[0] ** 2
    if not var > 0:
        raise DomainError(f"target variance {var:.3g} is not positive: not the moments of a density")
    mean, sd = float(raw_target[0]), float(np.sqrt(var))
    target = _standardize(raw_target, mean, sd)
    theta = _theta_to_standard(theta0, mean, sd)
    if not is_valid_theta(theta):
        theta = gaussian_theta(0.0, 1.0, m)
    if m == 2:
        # Gaussian: the moment match is closed form
        return _theta_from_standard(gaussian_theta(0.0, 1.0), mean, sd)

    def evaluate(th):
        with np.errstate(over="ignore", invalid="ignore"):
            res = _integrals(th, max_power=2 * m)
        psi, mom = float(res.log_mass[0]), res.moments[0]
        if not (np.isfinite(psi) and np.all(np.isfinite(mom))):
            raise QuadratureError("non-finite moments")
        return psi, mom

    def raw_error(mom):
        return float(np.max(np.abs(_unstandardize(mom[:m], mean, sd) - raw_target)))

    # lift a nested lower-order start just inside the manifold
    if theta[-1] == 0.0:
        theta[-1] = -LIFT
    try:
        psi, mom = evaluate(theta)
    except FinFiltError:
        theta = gaussian_theta(0.0, 1.0, m)
        theta[-1] = -LIFT
        psi, mom = evaluate(theta)
    for it in range(max_iter):
        grad = mom[:m] - target
        if raw_error(mom) < tol:
            return _finish(theta, evaluate, raw_error, mean, sd, raw_target, tol)
        value = psi - theta @ target
        fisher = fisher_information(theta, mom)
        step = -_scaled_solve(fisher, grad)
        trial = theta + step
        accepted = None
        if is_valid_theta(trial):
            try:
                psi_t, mom_t = evaluate(trial)
            except FinFiltError:
                psi_t = np.inf
            if np.isfinite(psi_t) and psi_t - trial @ target <= value + 1e-4 * float(grad @ step):
                accepted = trial, psi_t, mom_t
        if accepted is None:
            accepted = _log_lead_step(theta, grad, fisher, value, target, evaluate)
        if accepted is None:
            best = _theta_from_standard(theta, mean, sd)
            if theta[-1] > -NEAR_BOUNDARY:
                raise BoundaryError("Newton iteration driven to the manifold boundary (theta_m -> 0)", theta=best)
            raise ConvergenceError("line search failed in moment matching", best=best, iterations=it)
        theta, psi, mom = accepted
    raise ConvergenceError(
        f"moment matching did not converge in {max_iter} iterations (residual {raw_error(mom):.3g})",
        best=_theta_from_standard(theta, mean, sd),
        iterations=max_iter,
    )


def _scaled_solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``H^-1 g`` with Jacobi scaling and a Levenberg shift if ``H`` is not positive definite."""
    m = g.size
    s = 1.0 / np.sqrt(np.maximum(np.abs(np.diag(H)), 1e-300))
    scaled = H * s[:, None] * s[None, :]
    shift = 0.0
    for _ in range(40):
        try:
            factor = linalg.cho_factor(scaled + shift * np.eye(m))
            return s * linalg.cho_solve(factor, g * s)
        except (linalg.LinAlgError, ValueError):
            shift = max(4 * shift, 1e-8)
    raise ConvergenceError("cannot regularise the Newton system")


def _log_lead_step(theta, grad, fisher, value, target, evaluate):
    """Damped Newton step in ``(theta_1, ..., theta_{m-1}, log(-theta_m))``.

    No step in these coordinates reaches ``theta_m = 0``.  A full step that
    is accepted is extended while the dual keeps decreasing, which speeds up
    the approach to solutions on the boundary (a nested lower-order member).
    """
    jac = np.ones(theta.size)
    jac[-1] = theta[-1]
    gz = jac * grad
    hz = fisher * jac[:, None] * jac[None, :]
    hz[-1, -1] += grad[-1] * theta[-1]
    try:
        dz = -_scaled_solve(hz, gz)
    except ConvergenceError:
        return None
    slope = float(gz @ dz)

    def attempt(t):
        trial = theta + t * dz
        with np.errstate(over="ignore"):
            trial[-1] = theta[-1] * np.exp(t * dz[-1])
        if not is_valid_theta(trial):
            return None
        try:
            psi_t, mom_t = evaluate(trial)
        except FinFiltError:
            return None
        return psi_t - trial @ target, (trial, psi_t, mom_t)

    t = 1.0
    for k in range(60):
        res = attempt(t)
        if res is not None and res[0] <= value + 1e-4 * t * slope + 1e-13 * abs(value):
            break
        t *= 0.5
    else:
        return None
    if k == 0:
        for _ in range(8):
            more = attempt(2 * t)
            if more is None or more[0] >= res[0]:
                break
            t, res = 2 * t, more
    return res[1]


def _finish(theta, evaluate, raw_error, mean, sd, raw_target, tol):
    """Back to raw coordinates, preferring the nested lower-order member when it matches as well."""
    m = theta.size
    if m >= 4:
        nested = theta.copy()
        nested[-2:] = 0.0
        if is_valid_theta(nested):
            try:
                _, mom = evaluate(nested)
            except FinFiltError:
                mom = None
            if mom is not None and raw_error(mom) < tol:
                theta = nested
    result = _snap_negligible(_theta_from_standard(theta, mean, sd), raw_target)
    _warn_if_near_boundary(result)
    return result


def theta_from_moments(moments, initial_theta=None, order: int | None = None) -> np.ndarray:
    """Default recovery: algebraic when 2m moments exist, then Newton on the first m.

    Falls back to Newton from ``initial_theta`` (or the moment-matched
    Gaussian) when the algebraic solve is ill-conditioned or leaves the
    manifold.
    """
    mv = moments if isinstance(moments, MomentVector) else MomentVector(moments)
    eta = mv.eta
    m = order if order is not None else (eta.size // 2 if eta.size >= 4 else eta.size)
    start = None
    if eta.size >= 2 * m:
        try:
            start = theta_from_moments_algebraic(MomentVector(eta[: 2 * m]))
        except (IllConditionedError, BoundaryError) as exc:
            logger.debug("algebraic theta recovery failed (%s); using Newton start", exc)
    if start is None:
        if initial_theta is not None:
            start = np.asarray(initial_theta, dtype=float)
        else:
            start = gaussian_theta(eta[0], eta[1] - eta[0] ** 2, m)
    return theta_from_moments_iterative(MomentVector(eta[:m]), start)


def gaussian_theta(mean: float, var: float, order: int = 2) -> np.ndarray:
    """Canonical parameters of ``N(mean, var)`` embedded in EP(order)."""
    if var <= 0:
        raise ValueError("variance must be positive")
    theta = np.zeros(order)
    theta[0] = mean / var
    theta[1] = -0.5 / var
    return theta


@dataclass(frozen=True)
class ExpFamilyDensity:
    """A member of EP(m), with ``psi(theta)`` computed at construction."""

    theta: np.ndarray
    log_normalizer: float = field(init=False)

    def __post_init__(self):
        theta = _check_theta(self.theta)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "log_normalizer", log_normalizer(theta))

    @classmethod
    def gaussian(cls, mean: float, var: float) -> "ExpFamilyDensity":
        return cls(gaussian_theta(mean, var, 2))

    @property
    def order(self) -> int:
        return self.theta.size

    @property
    def near_boundary(self) -> bool:
        return bool(-NEAR_BOUNDARY <= self.theta[-1] < 0)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return poly_eval(self.theta[None, :], x.reshape(1, -1)).reshape(x.shape) - self.log_normalizer

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def moments(self, count: int) -> np.ndarray:
        return moments_from_theta(self.theta, count).values

    def expect(self, funcs: Sequence[Callable]) -> np.ndarray:
        res = _integrals(self.theta, funcs=tuple(funcs))
        return res.extra[0]

    def support(self) -> tuple[float, float]:
        res = _integrals(self.theta)
        return float(res.window[0, 0]), float(res.window[0, 1])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Inverse-CDF sampling on a fine grid over the quadrature window."""
        if self.order == 2:
            var = -0.5 / self.theta[1]
            return rng.normal(self.theta[0] * var, np.sqrt(var), size)
        lo, hi = self.support()
        xs = np.linspace(lo, hi, 20001)
        dens = self.pdf(xs)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
        cdf /= cdf[-1]
        return np.interp(rng.random(size), cdf, xs)

    def to_json(self) -> dict:
        return {"order": self.order, "theta": self.theta.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "ExpFamilyDensity":
        theta = np.asarray(data["theta"], dtype=float)
        if "order" in data and int(data["order"]) != theta.size:
            raise ValueError("order does not match the length of theta")
        return cls(theta)


class Density(Protocol):
    """Anything that can report moments and expectations of functions."""

    def moments(self, count: int) -> np.ndarray: ...

    def expect(self, funcs: Sequence[Callable]) -> np.ndarray: ...


@dataclass(frozen=True)
class DensityEvaluator:
    """A normalised density given by its log-pdf and the window holding its mass.

    Integrals are taken on the window only; :meth:`expect` raises
    :class:`DomainError` if the window does not capture the full unit mass.
    """

    logpdf: LogFn
    window: tuple[float, float]
    mass_tol: float = 1e-8

    def _integrate(self, max_power=0, funcs=()) -> QuadResult:
        lo, hi = self.window
        res = window_integrals(self.logpdf, lo, hi, max_power=max_power, funcs=funcs)
        mass = float(np.exp(res.log_mass[0]))
        if abs(mass - 1.0) > self.mass_tol:
            raise DomainError(
                f"density integrates to {mass:.12g} on [{lo:g}, {hi:g}]; "
                "mass lies outside the quadrature window or it is not normalised"
            )
        return res

    def moments(self, count: int) -> np.ndarray:
        return self._integrate(max_power=count).moments[0]

    def expect(self, funcs: Sequence[Callable]) -> np.ndarray:
        return self._integrate(funcs=tuple(funcs)).extra[0]


def expectation(q: ExpFamilyDensity, f: Callable) -> float:
    """``E_q[f]`` by the shared quadrature rule."""
    return float(q.expect([f])[0])


def kl_divergence(p: Density, q: ExpFamilyDensity) -> float:
    """``D(p, q) = E_p[log p - log q]`` for a density evaluator ``p``."""
    if not hasattr(p, "logpdf"):
        raise TypeError("p must expose logpdf")
    return float(p.expect([lambda x: p.logpdf(x) - q.logpdf(x)])[0])


def kl_project(p: Density, order: int, initial_theta=None) -> ExpFamilyDensity:
    """Closest member of EP(order) to ``p`` in Kullback-Leibler divergence.

    The minimiser shares the first ``order`` moments with ``p``; it is found
    with the algebraic Hankel solve as a starting point (when ``p`` has
    moments up to ``2 * order``) followed by Newton moment matching.
    """
    if order < 2 or order % 2:
        raise ValueError("order must be even and >= 2")
    eta = np.asarray(p.moments(2 * order), dtype=float)
    theta = theta_from_moments(MomentVector(eta), initial_theta=initial_theta, order=order)
    return ExpFamilyDensity(theta)
