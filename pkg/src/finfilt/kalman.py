"""Gaussian projection filter for the CIR factor model and its quasi-likelihood.

Prediction propagates the exact conditional mean and variance of each CIR
factor; correction is the Kalman update on the affine yield map, with the
positive part applied to the corrected mean.  The quasi-likelihood is the
product of the Gaussian innovation densities.  An augmented-state extended
Kalman filter treats the model parameters as constant extra states.
"""

from __future__ import annotations

import logging
import time as _time
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import linalg, optimize

from .cir import CirParams, YieldObservation, loading_jacobians, loadings
from .errors import FilterStepError, IllConditionedError

logger = logging.getLogger(__name__)

Stage = Literal["predicted", "corrected"]
SYM_TOL = 1e-10
PARAM_FLOOR = 1e-8


@dataclass(frozen=True)
class KalmanState:
    xhat: np.ndarray
    v: np.ndarray
    stage: Stage
    time: float = 0.0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.xhat, dtype=float))
        v = np.atleast_2d(np.asarray(self.v, dtype=float))
        if v.shape != (x.size, x.size):
            raise ValueError(f"v must be {x.size}x{x.size}, got {v.shape}")
        if self.stage not in ("predicted", "corrected"):
            raise ValueError(f"unknown stage {self.stage!r}")
        scale = max(1.0, float(np.max(np.abs(v))))
        if np.max(np.abs(v - v.T)) > SYM_TOL * scale:
            raise ValueError("v must be symmetric")
        object.__setattr__(self, "xhat", x)
        object.__setattr__(self, "v", 0.5 * (v + v.T))


def stationary_state(params: CirParams, time: float = 0.0) -> KalmanState:
    """Long-run mean and variance of the factors, treated as a corrected state."""
    return KalmanState(params.theta.copy(), np.diag(params.stationary_var), "corrected", time)


def predict(state: KalmanState, params: CirParams, dt: float = 1.0) -> KalmanState:
    """Exact first two moments of the factors ``dt`` later, assuming a Gaussian prior.

    The variance adds the CIR conditional variance at the current mean to
    the decayed prior variance; covariances between factors only decay.
    """
    if state.stage != "corrected":
        raise ValueError("predict expects a corrected state")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.xhat.size != params.factors:
        raise ValueError(f"state has {state.xhat.size} factors, params {params.factors}")
    decay = np.exp(-params.k * dt)
    one = -np.expm1(-params.k * dt)
    x = state.xhat
    mean = params.theta * one + decay * x
    noise = params.sigma**2 * one / params.k * (params.theta * one / 2 + decay * x)
    v = state.v * np.outer(decay, decay) + np.diag(noise)
    return KalmanState(mean, v, "predicted", state.time + dt)


def _innovation(state: KalmanState, obs: YieldObservation, params: CirParams):
    chi, Psi = loadings(params, obs.maturities)
    delta = params.delta_for(obs.size)
    resid = obs.yields - chi - Psi @ state.xhat
    S = Psi @ state.v @ Psi.T + np.diag(delta**2)
    return resid, S, Psi, delta


def _cholesky(S: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as exc:
        raise IllConditionedError(f"{what} is not positive definite", condition=float("inf")) from exc


def correct(
    state: KalmanState,
    obs: YieldObservation,
    params: CirParams,
    form: Literal["auto", "information", "gain"] = "auto",
) -> KalmanState:
    """Bayes update on the yields, positive part on the mean.

    ``"information"`` computes ``V+ = (Psi' D^-2 Psi + V^-1)^-1`` and needs
    ``V`` invertible; ``"gain"`` uses ``V - V Psi' S^-1 Psi V``.  ``"auto"``
    takes the information form when ``V`` is positive definite.
    """
    if state.stage != "predicted":
        raise ValueError("correct expects a predicted state")
    resid, S, Psi, delta = _innovation(state, obs, params)
    L = _cholesky(S, "innovation covariance")
    PV = Psi @ state.v
    gain_t = linalg.cho_solve((L, True), PV)  # S^-1 Psi V, i.e. the transposed gain
    mean = np.maximum(state.xhat + gain_t.T @ resid, 0.0)
    use_info = form == "information"
    if form == "auto":
        try:
            linalg.cholesky(state.v, lower=True)
            use_info = np.linalg.cond(state.v) < 1e12
        except linalg.LinAlgError:
            use_info = False
    elif form not in ("information", "gain"):
        raise ValueError(f"unknown correction form {form!r}")
    if use_info:
        info = Psi.T @ (Psi / delta[:, None] ** 2) + np.linalg.inv(state.v)
        v = np.linalg.inv(info)
    else:
        v = state.v - PV.T @ gain_t
    return KalmanState(mean, 0.5 * (v + v.T), "corrected", state.time)


def innovation_loglik(state: KalmanState, obs: YieldObservation, params: CirParams) -> float:
    """Log density of the innovation under ``N(0, Psi V Psi' + D^2)``."""
    if state.stage != "predicted":
        raise ValueError("innovation_loglik expects a predicted state")
    resid, S, _, _ = _innovation(state, obs, params)
    L = _cholesky(S, "innovation covariance")
    z = linalg.solve_triangular(L, resid, lower=True)
    return float(-0.5 * resid.size * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * z @ z)


@dataclass(frozen=True)
class StepRecord:
    t: float
    xhat: np.ndarray
    v_diag: np.ndarray
    innovation: np.ndarray
    loglik: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "xhat": self.xhat.tolist(),
            "v_diag": self.v_diag.tolist(),
            "innovation": self.innovation.tolist(),
            "loglik": self.loglik,
        }


def run_kalman(
    panel: Sequence[YieldObservation], beta: CirParams, init: KalmanState | None = None
) -> list[StepRecord]:
    """Predict, score and correct through the panel.

    ``init`` is a corrected state; by default the stationary law one unit
    of time before the first observation.  The prediction horizon of each
    step is the time since the previous state.
    """
    out: list[StepRecord] = []
    _filter(panel, beta, init, out)
    return out


def _filter(panel, beta: CirParams, init: KalmanState | None, records: list | None) -> float:
    """Lean version of the predict / score / correct loop.

    With ``A = Psi' D^-2 Psi`` and ``b = Psi' D^-2 r`` the update only needs
    ``K x K`` algebra: the gain step is ``(I + V A)^-1 V b``, the new
    covariance ``(I + V A)^-1 V`` and ``det S = det D^2 det(I + V A)``.
    These identities hold for singular ``V`` as well.
    """
    if len(panel) == 0:
        raise ValueError("panel must be non-empty")
    state = init if init is not None else stationary_state(beta, panel[0].t - 1.0)
    if state.stage != "corrected":
        raise ValueError("initial state must be corrected")
    x, v, now = state.xhat.copy(), state.v.copy(), state.time
    K = x.size
    eye = np.eye(K)
    k, theta, s2 = beta.k, beta.theta, beta.sigma**2
    loads: dict = {}
    steps: dict = {}
    total = 0.0
    log2pi = np.log(2 * np.pi)
    for i, obs in enumerate(panel):
        dt = obs.t - now
        if not dt > 0:
            raise FilterStepError(f"observation time {obs.t} does not advance past {now}", step=i + 1, partial=records)
        if dt not in steps:
            decay = np.exp(-k * dt)
            one = -np.expm1(-k * dt)
            steps[dt] = (decay, theta * one, np.outer(decay, decay), s2 * one / k * theta * one / 2, s2 * one / k * decay)
        decay, drift, decay2, q0, q1 = steps[dt]
        x_pred = drift + decay * x
        v = v * decay2 + np.diag(q0 + q1 * x)
        key = obs.maturities.tobytes()
        if key not in loads:
            chi, Psi = loadings(beta, obs.maturities)
            d2 = beta.delta_for(obs.size) ** 2
            loads[key] = (chi, Psi, d2, Psi / d2[:, None], float(np.sum(np.log(d2))), Psi.T @ (Psi / d2[:, None]))
        chi, Psi, d2, Psi_w, logdet_d, A = loads[key]
        resid = obs.yields - chi - Psi @ x_pred
        b = Psi_w.T @ resid
        if K == 1:
            m = 1.0 + v[0, 0] * A[0, 0]
            sign, logdet_m = (1.0 if m > 0 else -1.0), np.log(abs(m))
            step, v_new = v[0] * b / m, v / m
        else:
            M = eye + v @ A
            sol = np.linalg.solve(M, np.column_stack([v @ b, v]))
            step, v_new = sol[:, 0], sol[:, 1:]
            sign, logdet_m = np.linalg.slogdet(M)
        quad = float(resid @ (resid / d2) - b @ step)
        if sign <= 0 or not np.isfinite(quad):
            raise FilterStepError("innovation covariance is not positive definite", step=i + 1, partial=records)
        ll = -0.5 * resid.size * log2pi - 0.5 * (logdet_d + logdet_m) - 0.5 * quad
        total += ll
        x = np.maximum(x_pred + step, 0.0)
        v = 0.5 * (v_new + v_new.T)
        now = obs.t
        if records is not None:
            records.append(StepRecord(obs.t, x.copy(), np.diag(v).copy(), resid, float(ll)))
    return float(total)


def quasi_loglik(panel: Sequence[YieldObservation], beta: CirParams, init: KalmanState | None = None) -> float:
    """Sum of innovation log densities along the filter."""
    return _filter(panel, beta, init, None)


@dataclass(frozen=True)
class QmlEstimate:
    beta: CirParams
    loglik: float
    iterations: int
    converged: bool
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.to_dict(),
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "evaluations": self.evaluations,
        }


def _pack(beta: CirParams) -> np.ndarray:
    return np.concatenate([np.log(beta.k), np.log(beta.theta), np.log(beta.sigma), beta.lam, np.log(beta.delta)])


def _unpack(z: np.ndarray, K: int) -> CirParams:
    with np.errstate(over="ignore"):
        return CirParams(
            np.exp(z[:K]), np.exp(z[K : 2 * K]), np.exp(z[2 * K : 3 * K]), z[3 * K : 4 * K], np.exp(z[4 * K :])
        )


@dataclass(frozen=True)
class QmlOptions:
    max_iter: int = 4000
    restarts: int = 3
    xatol: float = 1e-6
    fatol: float = 1e-8
    init: KalmanState | None = field(default=None, compare=False)


def estimate_qml(panel: Sequence[YieldObservation], beta0: CirParams, options: QmlOptions | None = None) -> QmlEstimate:
    """Maximise the quasi-likelihood by Nelder-Mead in a transformed space.

    ``k, theta, sigma, delta`` are optimised on the log scale and ``lambda``
    as is, so every trial point is feasible.  The simplex is restarted
    around the incumbent until a restart no longer improves it.
    """
    opts = options or QmlOptions()
    K = beta0.factors
    evals = 0

    def objective(z):
        nonlocal evals
        evals += 1
        if not np.all(np.isfinite(z)) or np.any(np.abs(z) > 700):
            return np.inf
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                beta = _unpack(z, K)
                value = -quasi_loglik(panel, beta, opts.init)
        except (ValueError, FilterStepError, IllConditionedError, FloatingPointError):
            return np.inf
        return value if np.isfinite(value) else np.inf

    z = _pack(beta0)
    best = objective(z)
    if not np.isfinite(best):
        raise ValueError("quasi-likelihood is not finite at the starting parameters")
    iterations = 0
    converged = False
    started = _time.perf_counter()
    for attempt in range(opts.restarts + 1):
        res = optimize.minimize(
            objective,
            z,
            method="Nelder-Mead",
            options={"maxiter": opts.max_iter, "xatol": opts.xatol, "fatol": opts.fatol, "adaptive": z.size > 4},
        )
        iterations += int(res.nit)
        improved = res.fun < best - opts.fatol
        if res.fun <= best:
            z, best = res.x, float(res.fun)
        converged = bool(res.success)
        logger.info("qml restart %d: loglik %.6f success=%s", attempt, -best, res.success)
        if not improved and res.success:
            break
    logger.info("qml finished in %.2fs after %d evaluations", _time.perf_counter() - started, evals)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        beta = _unpack(z, K)
    estimate = QmlEstimate(beta, -best, iterations, converged, evals)
    if not converged:
        logger.warning("quasi-likelihood maximisation did not converge; returning best point")
    return estimate


# ---------------------------------------------------------------------------
# augmented-state extended Kalman filter


@dataclass(frozen=True)
class AugmentedState:
    """Mean and covariance over ``(x, k, theta, sigma, lambda, delta)``.

    ``factors`` is ``K``; the delta block has length ``mean.size - 5 K``.
    ``clamped`` records that some parameter mean was lifted to the
    feasibility floor during the last step.
    """

    mean: np.ndarray
    cov: np.ndarray
    factors: int
    time: float = 0.0
    clamped: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        K = self.factors
        if mean.ndim != 1 or mean.size <= 5 * K:
            raise ValueError("mean must hold K factors, 4K parameters and at least one delta")
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    def block(self, name: str) -> np.ndarray:
        K = self.factors
        idx = {"x": 0, "k": 1, "theta": 2, "sigma": 3, "lam": 4}
        if name == "delta":
            return self.mean[5 * K :]
        return self.mean[idx[name] * K : (idx[name] + 1) * K]

    def params(self) -> CirParams:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return CirParams(self.block("k"), self.block("theta"), self.block("sigma"), self.block("lam"), self.block("delta"))

    @classmethod
    def from_params(
        cls,
        params: CirParams,
        x: np.ndarray | None = None,
        x_cov: np.ndarray | None = None,
        param_cov: np.ndarray | None = None,
        time: float = 0.0,
    ) -> "AugmentedState":
        """Factors at ``x`` (default ``theta``) and parameters at ``params``.

        ``param_cov`` defaults to zero, which pins the parameters.
        """
        K = params.factors
        x = params.theta.copy() if x is None else np.asarray(x, dtype=float)
        mean = np.concatenate([x, params.k, params.theta, params.sigma, params.lam, params.delta])
        cov = np.zeros((mean.size, mean.size))
        cov[:K, :K] = np.diag(params.stationary_var) if x_cov is None else x_cov
        if param_cov is not None:
            cov[K:, K:] = param_cov
        return cls(mean, cov, K, time)


def _floor_psd(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    scale = max(float(np.max(np.abs(np.diag(P)))), 1e-300)
    w, U = np.linalg.eigh(P)
    if w[0] >= -SYM_TOL * scale:
        return P
    P = (U * np.maximum(w, 0.0)) @ U.T
    return 0.5 * (P + P.T)


def _clamp(mean: np.ndarray, K: int) -> tuple[np.ndarray, bool]:
    out = mean.copy()
    positive = np.r_[K : 4 * K, 5 * K : mean.size]
    low = out[positive] < PARAM_FLOOR
    out[positive[low]] = PARAM_FLOOR
    return out, bool(np.any(low))


def augmented_predict(state: AugmentedState, dt: float = 1.0) -> AugmentedState:
    """Mean ODE solution for the factors, parameters frozen, first-order covariance."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    K = state.factors
    mean, clamped = _clamp(state.mean, K)
    x, k, th, sg = mean[:K], mean[K : 2 * K], mean[2 * K : 3 * K], mean[3 * K : 4 * K]
    decay = np.exp(-k * dt)
    one = -np.expm1(-k * dt)
    new = mean.copy()
    new[:K] = th + (x - th) * decay
    F = np.eye(mean.size)
    idx = np.arange(K)
    F[idx, idx] = decay
    F[idx, K + idx] = -(x - th) * dt * decay
    F[idx, 2 * K + idx] = one
    xp = np.maximum(x, 0.0)
    Q = np.zeros_like(F)
    Q[idx, idx] = sg**2 * one / k * (th * one / 2 + decay * xp)
    P = _floor_psd(F @ state.cov @ F.T + Q)
    return AugmentedState(new, P, K, state.time + dt, clamped)


def augmented_update(state: AugmentedState, obs: YieldObservation) -> AugmentedState:
    """Linearised measurement update of the augmented state."""
    K = state.factors
    mean, clamped = _clamp(state.mean, K)
    n_delta = mean.size - 5 * K
    n = obs.size
    if n_delta != 1 and n > n_delta:
        raise ValueError(f"observation has {n} maturities but the state carries {n_delta} deltas")
    params = AugmentedState(mean, state.cov, K).params()
    x = mean[:K]
    chi, Psi = loadings(params, obs.maturities)
    jac = loading_jacobians(params, obs.maturities)
    H = np.zeros((n, mean.size))
    H[:, :K] = Psi
    for b, name in enumerate(("k", "theta", "sigma", "lam"), start=1):
        dchi, dPsi = jac[name]
        H[:, b * K : (b + 1) * K] = dchi + dPsi * x[None, :]
    delta = params.delta_for(n)
    R = np.diag(delta**2)
    resid = obs.yields - chi - Psi @ x
    P = state.cov
    PH = P @ H.T
    S = H @ PH + R
    L = _cholesky(S, "innovation covariance")
    G = linalg.cho_solve((L, True), PH.T).T
    new = mean + G @ resid
    new[:K] = np.maximum(new[:K], 0.0)
    IGH = np.eye(mean.size) - G @ H
    Pn = IGH @ P @ IGH.T + G @ R @ G.T
    new, c2 = _clamp(new, K)
    return AugmentedState(new, _floor_psd(Pn), K, state.time, clamped or c2)


def augmented_ekf_step(state: AugmentedState, obs: YieldObservation, dt: float | None = None) -> AugmentedState:
    """One time update over ``dt`` (default: up to ``obs.t``) and one measurement update."""
    if dt is None:
        dt = obs.t - state.time
    pred = augmented_predict(state, dt)
    out = augmented_update(pred, obs)
    if out.clamped:
        logger.warning("t=%g: parameter means clamped to the feasibility floor", obs.t)
    return out
