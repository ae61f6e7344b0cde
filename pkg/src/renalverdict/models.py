"""Compartment signal models.

Units: b in ms/um^2, diffusivities in um^2/ms, times in ms, radii in um.
Functions broadcast over numpy arrays; protocol arrays are usually shape
(n_meas,) and parameters (n_voxels, 1).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
from scipy.optimize import brentq
from scipy.special import erf

from .acquisition import AcquisitionPoint, AcquisitionScheme, pulse_strength_factor

ASTRO_SERIES_EPS = 1e-6
R_MIN, R_MAX = 0.01, 15.0


@dataclass(frozen=True)
class FixedDiffusivities:
    d_ic: float = 2.0
    d_ees: float = 2.0
    d_vasc: float = 50.0
    vascular: str = "astrosticks"

    def __post_init__(self):
        if min(self.d_ic, self.d_ees, self.d_vasc) <= 0:
            raise ValueError("diffusivities must be positive")
        if self.vascular not in ("astrosticks", "ball"):
            raise ValueError(f"unknown vascular geometry {self.vascular!r}")


@dataclass(frozen=True)
class TissueParams:
    f_ic: float
    f_ees: float
    radius: float

    def __post_init__(self):
        tol = 1e-12
        if not (-tol <= self.f_ic <= 1 + tol and -tol <= self.f_ees <= 1 + tol):
            raise ValueError(f"fractions out of [0, 1]: {self.f_ic}, {self.f_ees}")
        if self.f_ic + self.f_ees > 1 + tol:
            raise ValueError(f"f_ic + f_ees = {self.f_ic + self.f_ees} exceeds 1")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    @property
    def f_vasc(self) -> float:
        return 1.0 - self.f_ic - self.f_ees


def _root_equation(x):
    return (x * x - 2.0) * math.sin(x) + 2.0 * x * math.cos(x)


@lru_cache(maxsize=8)
def sphere_roots(n_roots: int = 40) -> np.ndarray:
    """First positive roots of ``(x^2 - 2) sin x + 2 x cos x = 0``.

    These are the zeros of the derivative of the first-order spherical Bessel
    function. One root lies in each interval (m*pi, (m+1)*pi).
    """
    roots = []
    for m in range(n_roots):
        lo = m * math.pi if m else 1e-3
        roots.append(brentq(_root_equation, lo, (m + 1) * math.pi, xtol=1e-14, rtol=1e-15, maxiter=200))
    out = np.array(roots)
    out.setflags(write=False)
    return out


def ball_signal(b, d):
    return np.exp(-np.asarray(b, dtype=float) * d)


def astrosticks_signal(b, d):
    """Orientation-averaged stick signal sqrt(pi / 4bd) erf(sqrt(bd))."""
    x = np.asarray(b, dtype=float) * d
    small = x <= ASTRO_SERIES_EPS
    xs = np.where(small, 1.0, x)
    out = np.sqrt(np.pi / (4.0 * xs)) * erf(np.sqrt(xs))
    return np.where(small, 1.0 - x / 3.0, out)


def vascular_signal(b, fixed: FixedDiffusivities):
    if fixed.vascular == "ball":
        return ball_signal(b, fixed.d_vasc)
    return astrosticks_signal(b, fixed.d_vasc)


def _gpd_terms(q, delta, Delta, radius, d, roots, with_grad=False):
    # a = alpha^2 = (x / R)^2, broadcast to (..., n_roots)
    radius = np.asarray(radius, dtype=float)[..., None]
    x2 = roots ** 2
    a = x2 / radius ** 2
    delta = np.asarray(delta, dtype=float)[..., None]
    Delta = np.asarray(Delta, dtype=float)[..., None]
    da = d * a
    e1 = np.exp(-da * delta)
    e2 = np.exp(-da * Delta)
    e3 = np.exp(-da * (Delta - delta))
    e4 = np.exp(-da * (Delta + delta))
    num = 2.0 * da * delta - 2.0 + 2.0 * e1 + 2.0 * e2 - e3 - e4
    den = d * d * a ** 3 * (x2 - 2.0)
    total = (num / den).sum(axis=-1)
    log_s = -2.0 * np.asarray(q, dtype=float) * total
    if not with_grad:
        return log_s, None
    dnum = d * (2.0 * delta - 2.0 * delta * e1 - 2.0 * Delta * e2
                + (Delta - delta) * e3 + (Delta + delta) * e4)
    dterm_da = (dnum - 3.0 * num / a) / den
    # da/dR = -2 a / R
    dtotal = (dterm_da * (-2.0 * a / radius)).sum(axis=-1)
    return log_s, -2.0 * np.asarray(q, dtype=float) * dtotal


def sphere_gpd(b, delta, Delta, radius, d, roots=None, with_grad=False):
    """Restricted-sphere signal under the Gaussian phase approximation.

    Parameters
    ----------
    b, delta, Delta : arrays broadcastable together (ms/um^2, ms, ms)
        b must be > 0 for every entry.
    radius : array broadcastable against b (um)
    d : float
        Intracellular diffusivity.
    with_grad : bool
        Also return dS/dradius.
    """
    if roots is None:
        roots = sphere_roots()
    radius = np.asarray(radius, dtype=float)
    if np.any(radius <= 0):
        raise ValueError("sphere radius must be positive")
    b = np.asarray(b, dtype=float)
    delta = np.asarray(delta, dtype=float)
    Delta = np.asarray(Delta, dtype=float)
    q = b / (delta ** 2 * (Delta - delta / 3.0))
    shape = np.broadcast_shapes(b.shape, radius.shape)
    bq, bdel, bDel, brad = (np.broadcast_to(v, shape) for v in (q, delta, Delta, radius))
    log_s, dlog = _gpd_terms(bq, bdel, bDel, brad, d, roots, with_grad)
    s = np.exp(log_s)
    if with_grad:
        return s, s * dlog
    return s


def sphere_gpd_signal(point: AcquisitionPoint, radius: float, d: float, roots=None) -> float:
    """Scalar convenience wrapper for a single DW acquisition point."""
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    pulse_strength_factor(point)  # rejects b0
    return float(sphere_gpd(point.b_internal, point.delta, point.Delta, radius, d, roots))


# exp(-50) ~ 2e-22: below double precision relative to the algebraic part
_EXP_CUTOFF = 50.0


@numba.njit(cache=True)
def _gpd_kernel(q, delta, Delta, radius, d, x2, with_grad):
    """log S and d(log S)/dR for every (voxel, measurement) pair."""
    n, m, nr = radius.shape[0], q.shape[0], x2.shape[0]
    log_s = np.empty((n, m))
    dlog = np.zeros((n, m))
    for i in range(n):
        r = radius[i]
        for j in range(m):
            dl, Dl = delta[j], Delta[j]
            shortest = min(dl, Dl - dl)
            total = 0.0
            dtotal = 0.0
            for k in range(nr):
                a = x2[k] / (r * r)
                da = d * a
                den = d * d * a * a * a * (x2[k] - 2.0)
                if da * shortest > _EXP_CUTOFF:
                    num = 2.0 * da * dl - 2.0
                    dnum = 2.0 * d * dl
                else:
                    e1 = np.exp(-da * dl)
                    e2 = np.exp(-da * Dl)
                    e3 = np.exp(-da * (Dl - dl))
                    e4 = e1 * e2
                    num = 2.0 * da * dl - 2.0 + 2.0 * e1 + 2.0 * e2 - e3 - e4
                    dnum = d * (2.0 * dl - 2.0 * dl * e1 - 2.0 * Dl * e2
                                + (Dl - dl) * e3 + (Dl + dl) * e4)
                total += num / den
                if with_grad:
                    dtotal += (dnum - 3.0 * num / a) / den * (-2.0 * a / r)
            log_s[i, j] = -2.0 * q[j] * total
            dlog[i, j] = -2.0 * q[j] * dtotal
    return log_s, dlog


class ProtocolArrays:
    """Flat per-measurement arrays of a scheme, b converted to ms/um^2."""

    def __init__(self, scheme: AcquisitionScheme):
        self.b = np.array([p.b_internal for p in scheme.points])
        self.delta = np.array([p.delta for p in scheme.points])
        self.Delta = np.array([p.Delta for p in scheme.points])
        self.is_b0 = np.array([p.is_b0 for p in scheme.points])
        self.dw = ~self.is_b0
        with np.errstate(divide="ignore", invalid="ignore"):
            self.q = np.where(self.dw, self.b / (self.delta ** 2 * (self.Delta - self.delta / 3.0)), 0.0)

    def __len__(self):
        return len(self.b)


def verdict_components(protocol: ProtocolArrays, radius, fixed: FixedDiffusivities,
                       roots=None, with_grad=False):
    """Per-compartment signals (vasc, ic, ees) on the DW entries.

    ``radius`` has shape (n_voxels,). Returns arrays of shape
    (n_voxels, n_dw) for the sphere term (and its radius derivative if
    requested), and (n_dw,) for the radius-independent terms.
    """
    if roots is None:
        roots = sphere_roots()
    radius = np.ascontiguousarray(radius, dtype=float).reshape(-1)
    if np.any(radius <= 0):
        raise ValueError("sphere radius must be positive")
    dw = protocol.dw
    b = protocol.b[dw]
    s_vasc = vascular_signal(b, fixed)
    s_ees = ball_signal(b, fixed.d_ees)
    log_s, dlog = _gpd_kernel(protocol.q[dw], protocol.delta[dw], protocol.Delta[dw], radius,
                              float(fixed.d_ic), np.ascontiguousarray(roots) ** 2, with_grad)
    s_ic = np.exp(log_s)
    if with_grad:
        return s_vasc, s_ic, s_ees, s_ic * dlog
    return s_vasc, s_ic, s_ees, None


def verdict_predict(f_ic, f_ees, radius, protocol: ProtocolArrays,
                    fixed: FixedDiffusivities = FixedDiffusivities(), roots=None,
                    with_grad=False):
    """Three-compartment signal for many voxels at once.

    Returns ``S`` of shape (n_voxels, n_meas) with b0 entries set to 1, and
    optionally ``(dS/df_ic, dS/df_ees, dS/dR)`` each of the same shape (zero
    on b0 entries).
    """
    f_ic = np.asarray(f_ic, dtype=float)[:, None]
    f_ees = np.asarray(f_ees, dtype=float)[:, None]
    f_vasc = 1.0 - f_ic - f_ees
    s_vasc, s_ic, s_ees, ds_ic = verdict_components(protocol, np.asarray(radius), fixed, roots, with_grad)
    n = f_ic.shape[0]
    S = np.ones((n, len(protocol)))
    S[:, protocol.dw] = f_vasc * s_vasc + f_ic * s_ic + f_ees * s_ees
    if not with_grad:
        return S
    g_ic = np.zeros_like(S)
    g_ees = np.zeros_like(S)
    g_r = np.zeros_like(S)
    g_ic[:, protocol.dw] = s_ic - s_vasc
    g_ees[:, protocol.dw] = np.broadcast_to(s_ees - s_vasc, (n, s_vasc.shape[0]))
    g_r[:, protocol.dw] = f_ic * ds_ic
    return S, (g_ic, g_ees, g_r)


def verdict_signal(params: TissueParams, fixed: FixedDiffusivities, point: AcquisitionPoint,
                   roots=None) -> float:
    """Signal of a single point; 1.0 for b0 points."""
    if point.is_b0:
        return 1.0
    b = point.b_internal
    s_ic = sphere_gpd(b, point.delta, point.Delta, params.radius, fixed.d_ic, roots)
    return float(params.f_vasc * vascular_signal(b, fixed)
                 + params.f_ic * s_ic + params.f_ees * ball_signal(b, fixed.d_ees))


def verdict_gradient(params: TissueParams, fixed: FixedDiffusivities, point: AcquisitionPoint,
                     roots=None):
    """(dS/df_ic, dS/df_ees, dS/dR) at a single point, f_vasc eliminated."""
    if point.is_b0:
        return 0.0, 0.0, 0.0
    b = point.b_internal
    s_ic, ds = sphere_gpd(b, point.delta, point.Delta, params.radius, fixed.d_ic, roots, with_grad=True)
    s_v = float(vascular_signal(b, fixed))
    s_e = float(ball_signal(b, fixed.d_ees))
    return float(s_ic) - s_v, s_e - s_v, float(params.f_ic * ds)


def adc_signal(s0, adc, b):
    return s0 * np.exp(-np.asarray(b, dtype=float) * adc)


def ivim_signal(s0, f, d_star, d, b):
    b = np.asarray(b, dtype=float)
    return s0 * (f * np.exp(-b * d_star) + (1.0 - f) * np.exp(-b * d))


def information_criteria(rss, n, k):
    """Gaussian-likelihood AIC and BIC.

    Returns ``(aic, bic)``; a zero residual gives ``(-inf, -inf)`` and a
    RuntimeWarning.
    """
    if not n > k >= 1:
        raise ValueError(f"need n > k >= 1, got n={n}, k={k}")
    if rss < 0:
        raise ValueError("rss must be non-negative")
    if rss == 0:
        warnings.warn("zero residual: information criteria are -inf", RuntimeWarning)
        return -math.inf, -math.inf
    ll = n * math.log(rss / n)
    return ll + 2 * k, ll + k * math.log(n)
