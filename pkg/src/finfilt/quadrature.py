"""Mode-centred adaptive quadrature for peaked, rapidly decaying integrands.

Every integral in the package goes through one rule: composite Gauss-Legendre
on a window bracketing the region where the log-integrand is within
``LOG_CUTOFF`` of its maximum, with panel doubling until successive estimates
agree to ``RTOL``.  Masses are computed relative to the maximum of the
log-integrand, so very peaked or very flat densities neither overflow nor
underflow.

* :func:`exp_poly_integrals` handles batches of ``exp(polynomial)`` integrands.
  Critical points and window edges come from polynomial roots, which brackets
  multimodal and extremely narrow densities exactly.
* :func:`log_density_integrals` handles an arbitrary vectorised log-integrand
  given a rough centre and scale; the window is found by scanning outward.
* :func:`window_integrals` integrates on a caller-fixed window.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import comb
from typing import Callable, Sequence

import numpy as np

from .errors import QuadratureError

LOG_CUTOFF = 50.0
GL_ORDER = 16
RTOL = 1e-13
MIN_PANELS = 8
MAX_PANELS = 4096

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(GL_ORDER)
# nodes/weights mapped to [0, 1]
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS

LogFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class QuadResult:
    """Log-mass and normalised expectations for a batch of ``n`` integrands.

    ``moments[:, j]`` is ``E[x**(j+1)]`` and ``extra[:, k]`` is
    ``E[funcs[k](x)]`` under the normalised integrand.
    """

    log_mass: np.ndarray
    moments: np.ndarray
    extra: np.ndarray
    window: np.ndarray
    panels: int


def unit_rule(panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on ``[0, 1]``."""
    edges = np.arange(panels, dtype=float) / panels
    nodes = (edges[:, None] + _GL_NODES[None, :] / panels).ravel()
    weights = np.tile(_GL_WEIGHTS / panels, panels)
    return nodes, weights


def poly_eval(coefs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_i coefs[:, i] * x**(i+1)`` row-wise by Horner's rule."""
    m = coefs.shape[1]
    out = np.zeros_like(x)
    for i in range(m - 1, -1, -1):
        out = (out + coefs[:, i : i + 1]) * x
    return out


def _batched_roots(poly: np.ndarray) -> np.ndarray:
    """Complex roots of each row of ``poly`` (highest degree first)."""
    n, deg1 = poly.shape
    deg = deg1 - 1
    if deg == 1:
        return (-poly[:, 1] / poly[:, 0])[:, None].astype(complex)
    with np.errstate(over="ignore", invalid="ignore"):
        monic = poly[:, 1:] / poly[:, :1]
    if not np.all(np.isfinite(monic)):
        raise QuadratureError("polynomial coefficients overflow")
    comp = np.zeros((n, deg, deg))
    comp[:, 0, :] = -monic
    comp[:, np.arange(1, deg), np.arange(deg - 1)] = 1.0
    return np.linalg.eigvals(comp)


def _poly_derivs(coefs: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = coefs.shape[1]
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    for i in range(1, m + 1):
        d1 = d1 + i * coefs[:, i - 1] * x ** (i - 1)
        if i >= 2:
            d2 = d2 + i * (i - 1) * coefs[:, i - 1] * x ** (i - 2)
    return d1, d2


def poly_mode(coefs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global maximiser and maximum of ``sum_i coefs[:, i] x**(i+1)`` per row.

    Candidates are the real parts of all roots of the derivative; the best
    one is polished by a few safeguarded Newton steps.
    """
    n, m = coefs.shape
    deriv = np.empty((n, m))
    for i in range(1, m + 1):
        deriv[:, m - i] = i * coefs[:, i - 1]
    cand = _batched_roots(deriv).real
    vals = poly_eval(coefs, cand)
    best = np.argmax(vals, axis=1)
    x = cand[np.arange(n), best]
    for _ in range(3):
        d1, d2 = _poly_derivs(coefs, x)
        step = np.where(d2 < 0, -d1 / np.where(d2 < 0, d2, -1.0), 0.0)
        trial = x + step
        better = poly_eval(coefs, trial[:, None])[:, 0] >= poly_eval(coefs, x[:, None])[:, 0]
        x = np.where(better & np.isfinite(trial), trial, x)
    return x, poly_eval(coefs, x[:, None])[:, 0]


def taylor_shift(coefs: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Coefficients of ``P(center + u) - P(center)`` in powers ``u, ..., u**m``.

    Evaluating in these local coordinates avoids the cancellation between
    large monomial terms when the mass sits far from zero.
    """
    n, m = coefs.shape
    out = np.zeros((n, m))
    for j in range(1, m + 1):
        for i in range(j, m + 1):
            out[:, j - 1] += comb(i, j) * coefs[:, i - 1] * center ** (i - j)
    return out


def poly_window(
    coefs: np.ndarray, cutoff: float = LOG_CUTOFF
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Bracket ``{x : P(x) > max P - cutoff}`` per row; returns (lo, hi, mode, pmax)."""
    if np.any(~np.isfinite(coefs)):
        raise QuadratureError("polynomial coefficients are not finite")
    if np.any(coefs[:, -1] >= 0):
        raise QuadratureError("leading coefficient must be negative for exp(polynomial) to integrate")
    n, m = coefs.shape
    mode, pmax = poly_mode(coefs)
    # roots of P(mode + u) - P(mode) + cutoff, in coordinates centred on the mode
    local = taylor_shift(coefs, mode)
    shifted = np.empty((n, m + 1))
    for i in range(1, m + 1):
        shifted[:, m - i] = local[:, i - 1]
    shifted[:, m] = cutoff
    roots = _batched_roots(shifted)
    real = np.abs(roots.imag) <= 1e-6 * (1.0 + np.abs(roots))
    re = roots.real
    lo = mode + np.minimum(np.where(real, re, np.inf).min(axis=1), 0.0)
    hi = mode + np.maximum(np.where(real, re, -np.inf).max(axis=1), 0.0)
    # roots lost to rounding: fall back on the curvature at the mode
    width = np.sqrt(2.0 * cutoff / np.maximum(-2.0 * local[:, 1], 1e-300))
    bad = ~np.isfinite(lo) | ~np.isfinite(hi) | (hi - lo <= 0)
    lo = np.where(bad, mode - width, lo)
    hi = np.where(bad, mode + width, hi)
    pad = 1e-3 * (hi - lo)
    return lo - pad, hi + pad, mode, pmax


def _integrate_on_window(lo, hi, logf, shift, max_power, funcs, panels, center=None):
    """One composite rule; with ``center`` given, ``lo``/``hi`` and the argument
    of ``logf`` are offsets from it, which keeps nodes exact for narrow windows
    far from zero."""
    t, w = unit_rule(panels)
    span = hi - lo
    u = lo[:, None] + span[:, None] * t[None, :]
    with np.errstate(under="ignore"):
        f = np.exp(logf(u) - shift[:, None]) * (w[None, :] * span[:, None])
    x = u if center is None else center[:, None] + u
    mass = f.sum(axis=1)
    k = max_power + len(funcs)
    sums = np.empty((lo.size, k))
    abs_sums = np.empty((lo.size, k))
    xp = np.ones_like(x)
    for j in range(max_power):
        xp = xp * x
        sums[:, j] = (f * xp).sum(axis=1)
        abs_sums[:, j] = (f * np.abs(xp)).sum(axis=1)
    for j, g in enumerate(funcs):
        gx = g(x)
        sums[:, max_power + j] = (f * gx).sum(axis=1)
        abs_sums[:, max_power + j] = (f * np.abs(gx)).sum(axis=1)
    return mass, sums, abs_sums


def _adaptive(lo, hi, logf, shift, max_power, funcs, rtol, center=None) -> QuadResult:
    panels = MIN_PANELS
    prev = _integrate_on_window(lo, hi, logf, shift, max_power, funcs, panels, center)
    while True:
        panels *= 2
        cur = _integrate_on_window(lo, hi, logf, shift, max_power, funcs, panels, center)
        mass_ok = np.abs(cur[0] - prev[0]) <= rtol * cur[0]
        # function expectations get an absolute floor: a value that is zero up
        # to rounding (a KL divergence of p from itself) has no relative accuracy
        floor = np.full_like(cur[2], 1e-300)
        floor[:, max_power:] = 1e-2
        floor = floor * cur[0][:, None]
        sums_ok = np.abs(cur[1] - prev[1]) <= rtol * np.maximum(cur[2], floor)
        if np.all(mass_ok) and np.all(sums_ok):
            break
        if panels >= MAX_PANELS:
            raise QuadratureError(
                f"quadrature did not converge with {panels} panels on "
                f"[{lo.min():.6g}, {hi.max():.6g}]"
            )
        prev = cur
    mass, sums, _ = cur
    if np.any(~np.isfinite(mass)) or np.any(mass <= 0):
        raise QuadratureError("integrand mass underflowed or is not finite")
    norm = sums / mass[:, None]
    return QuadResult(
        log_mass=np.log(mass) + shift,
        moments=norm[:, :max_power],
        extra=norm[:, max_power:],
        window=np.stack([lo, hi], axis=1) + (0.0 if center is None else center[:, None]),
        panels=panels,
    )


def exp_poly_integrals(
    coefs: np.ndarray,
    max_power: int = 0,
    funcs: Sequence[LogFn] = (),
    logf: LogFn | None = None,
    rtol: float = RTOL,
) -> QuadResult:
    """Integrate ``exp(P_r(x))`` for every row ``r`` of ``coefs``.

    ``coefs[r, i]`` multiplies ``x**(i+1)``; the last column must be negative.
    ``logf`` may evaluate the same exponent (up to a per-row constant) in a
    numerically kinder form on an ``(n, nodes)`` array, in which case the
    polynomial only places the window and ``log_mass`` refers to ``logf``.
    """
    coefs = np.atleast_2d(np.asarray(coefs, dtype=float))
    lo, hi, mode, pmax = poly_window(coefs)
    if logf is None:
        local = taylor_shift(coefs, mode)

        def logf(u: np.ndarray) -> np.ndarray:
            return poly_eval(local, u)

        result = _adaptive(lo - mode, hi - mode, logf, np.zeros_like(pmax), max_power, tuple(funcs), rtol, mode)
        return replace(result, log_mass=result.log_mass + pmax)
    shift = logf(mode[:, None])[:, 0]
    return _adaptive(lo, hi, logf, shift, max_power, tuple(funcs), rtol)


def log_density_integrals(
    logf: LogFn,
    center: float,
    scale: float,
    max_power: int = 0,
    funcs: Sequence[LogFn] = (),
    rtol: float = RTOL,
    scan_points: int = 401,
) -> QuadResult:
    """Integrate ``exp(logf(x))`` over the real line for one log-integrand.

    ``logf`` must accept arrays of any shape.  ``center`` and ``scale`` are a
    rough guess of where the mass sits; the search window grows or shrinks
    until both edges are ``LOG_CUTOFF`` below the maximum.
    """
    if not (scale > 0 and np.isfinite(scale) and np.isfinite(center)):
        raise QuadratureError(f"bad window hint centre={center!r} scale={scale!r}")
    lo, hi = center - 20.0 * scale, center + 20.0 * scale
    for _ in range(80):
        xs = np.linspace(lo, hi, scan_points)
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            vals = logf(xs)
        vals = np.where(np.isnan(vals), -np.inf, vals)
        vmax = vals.max()
        if not np.isfinite(vmax):
            raise QuadratureError("log-integrand is not finite anywhere on the search window")
        above = np.nonzero(vals > vmax - LOG_CUTOFF)[0]
        first, last = above[0], above[-1]
        span = hi - lo
        if first == 0:
            lo -= span
            continue
        if last == scan_points - 1:
            hi += span
            continue
        if last - first < 40:
            # mass sits in a few scan cells: zoom in
            step = span / (scan_points - 1)
            lo, hi = xs[first] - 2 * step, xs[last] + 2 * step
            continue
        a, b = xs[first - 1], xs[last + 1]
        break
    else:
        raise QuadratureError("could not bracket the support of the integrand")
    return _adaptive(
        np.array([a]), np.array([b]), logf, np.array([vmax]), max_power, tuple(funcs), rtol
    )


def window_integrals(
    logf: LogFn,
    lo: float,
    hi: float,
    max_power: int = 0,
    funcs: Sequence[LogFn] = (),
    rtol: float = 1e-11,
) -> QuadResult:
    """Integrate ``exp(logf)`` on the fixed interval ``[lo, hi]``."""
    xs = np.linspace(lo, hi, 2001)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        vals = logf(xs)
    vmax = np.nanmax(np.where(np.isfinite(vals), vals, -np.inf))
    if not np.isfinite(vmax):
        raise QuadratureError("log-integrand is not finite anywhere on the window")
    return _adaptive(
        np.array([float(lo)]), np.array([float(hi)]), logf, np.array([vmax]),
        max_power, tuple(funcs), rtol,
    )
