"""Model-based symbol detectors for flat fading with known phase.

All metrics are arrays of shape ``(N, M)``: one row per received symbol,
one column per candidate message; decisions take the row-wise argmax with
the lowest index winning ties.

The likelihood of candidate ``m`` given the derotated sample ``r'`` and a
fading magnitude ``alpha`` is proportional to ``exp(alpha*z_m - alpha^2*e_m)``
with the noise-normalised statistics

    z_m = 2 Re{r' conj(x_m)} / N0,     e_m = |x_m|^2 / N0,

and the MAP metric is the log of that kernel averaged over the fading density.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc, erfcx, log_ndtr

from .channel import (
    NOISE_VAR,
    ChannelDraw,
    Constellation,
    FadingSpec,
    PilotDataset,
    RayleighFixed,
    RayleighUniformScale,
)

__all__ = [
    "NumericalError",
    "QuadratureConfig",
    "qfunc",
    "matched_filter_stats",
    "log_rayleigh_integral",
    "rayleigh_map_metric",
    "numeric_map_metric",
    "numeric_map_detect",
    "alpha_max",
    "map_detect",
    "min_distance_detect",
    "estimate_scale_ml",
    "aggregate_scales",
]

_SQRT_PI = math.sqrt(math.pi)


class NumericalError(ArithmeticError):
    """A detector metric became non-finite."""


@dataclass(frozen=True)
class QuadratureConfig:
    node_count: int = 96
    tail_epsilon: float = 1e-12
    scale_mixture_nodes: int = 32
    # half-width of the integration window, in kernel standard deviations
    window: float = 9.0

    def __post_init__(self):
        if self.node_count < 16:
            raise ValueError("node_count must be >= 16")
        if self.scale_mixture_nodes < 16:
            raise ValueError("scale_mixture_nodes must be >= 16")
        if not 0 < self.tail_epsilon < 1:
            raise ValueError("tail_epsilon must lie in (0, 1)")
        if not self.window > 0:
            raise ValueError("window must be positive")


def qfunc(x):
    """Gaussian tail probability ``Q(x) = P(N(0,1) > x)``."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def matched_filter_stats(features, c: Constellation, noise_var: float = NOISE_VAR):
    """Noise-normalised correlations ``z`` (N, M) and energies ``e`` (M,).

    ``features`` are the derotated samples ``(Re r', Im r')``; the inner
    product with ``(Re x_m, Im x_m)`` equals ``Re{r' conj(x_m)}``.
    """
    f = np.atleast_2d(np.asarray(features, dtype=float))
    basis = np.stack([c.points.real, c.points.imag])
    z = (2.0 / noise_var) * (f @ basis)
    return z, c.energies / noise_var


def _log1p_tilted(mu):
    # log(1 + sqrt(pi) mu exp(mu^2/4) Phi(mu/sqrt 2)), stable for all real mu
    mu = np.asarray(mu, dtype=float)
    out = np.empty_like(mu)
    pos = mu > 0
    mp = mu[pos]
    out[pos] = np.logaddexp(0.0, np.log(_SQRT_PI * mp) + 0.25 * mp * mp + log_ndtr(mp / math.sqrt(2.0)))
    mid = (~pos) & (mu > -40.0)
    mm = mu[mid]
    out[mid] = np.log1p(0.5 * _SQRT_PI * mm * erfcx(-0.5 * mm))
    far = mu <= -40.0
    inv2 = 1.0 / mu[far] ** 2
    # asymptotic series of erfcx; next term is below 1e-9 relative here
    out[far] = np.log(inv2 * (2.0 - inv2 * (12.0 - inv2 * (120.0 - 1680.0 * inv2))))
    return out


def log_rayleigh_integral(z, e, sigma: float):
    """``log int_0^inf exp(a z - a^2 e) Rayleigh(a; sigma) da`` in closed form.

    With ``gamma = 2 sigma^2 e`` and ``mu = z * sqrt(gamma / (e (1+gamma)))``
    the integral is ``(1 + sqrt(pi) mu exp(mu^2/4) (1 - Q(mu/sqrt 2))) / (1+gamma)``.
    """
    z = np.asarray(z, dtype=float)
    e = np.asarray(e, dtype=float)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if np.any(e <= 0):
        raise ValueError("candidate energies must be positive")
    gamma = 2.0 * sigma**2 * e
    mu = np.sqrt(gamma / (e * (1.0 + gamma))) * z
    mu, gamma = np.broadcast_arrays(mu, gamma)
    return _log1p_tilted(mu) - np.log1p(gamma)


def _check_finite(metric: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(metric)):
        bad = np.argwhere(~np.isfinite(metric))[0]
        raise NumericalError(f"non-finite metric for candidate m={bad[-1]}")
    return metric


def rayleigh_map_metric(features, c: Constellation, sigma: float,
                        noise_var: float = NOISE_VAR) -> np.ndarray:
    """Closed-form MAP metric for Rayleigh(``sigma``) fading."""
    z, e = matched_filter_stats(features, c, noise_var)
    return _check_finite(log_rayleigh_integral(z, e, sigma))


# -- numerical integration ----------------------------------------------------

def alpha_max(spec: FadingSpec, tail_epsilon: float) -> float:
    """Truncation point where the Rayleigh tail of the widest scale drops to ``tail_epsilon``."""
    return spec.scale_range[1] * math.sqrt(2.0 * math.log(1.0 / tail_epsilon))


_TABLE_INTERVALS = 8192


def _scale_components(spec: FadingSpec, q: QuadratureConfig):
    """Scale nodes and log weights with ``p(a)/a = sum_j exp(c_j - a^2/(2 s_j^2))``."""
    if isinstance(spec, RayleighFixed):
        s = np.array([spec.sigma])
        return s, np.array([-2.0 * math.log(spec.sigma)])
    if isinstance(spec, RayleighUniformScale):
        s, w = spec._sigma_rule(q.scale_mixture_nodes)
        return s, np.log(w) - 2.0 * np.log(s)
    raise TypeError(f"unsupported fading spec {spec!r}")


@functools.lru_cache(maxsize=32)
def _density_table(spec: FadingSpec, q: QuadratureConfig):
    """Cubic-Hermite table of ``g(a) = log(p(a)/a)`` and ``g'(a)`` on ``[0, a_max]``."""
    amax = alpha_max(spec, q.tail_epsilon)
    grid = np.linspace(0.0, amax, _TABLE_INTERVALS + 1)
    if isinstance(spec, RayleighFixed):
        s2 = spec.sigma**2
        g = -math.log(s2) - grid**2 / (2 * s2)
        dg = -grid / s2
    else:
        g, dg = spec.log_pdf_over_alpha(grid, q.scale_mixture_nodes)
    s, c = _scale_components(spec, q)
    return amax / _TABLE_INTERVALS, np.ascontiguousarray(g), np.ascontiguousarray(dg), s, c


@functools.lru_cache(maxsize=8)
def _relative_reach(window: float) -> float:
    """Root of ``x - log(1 + x) = window^2 / 2``."""
    drop = 0.5 * window * window
    return brentq(lambda x: x - math.log1p(x) - drop, 0.0, 4.0 * drop + 10.0)


@numba.njit(cache=True, nogil=True)
def _tilted_peak(z, a):
    # positive root of 2a x^2 - z x - 1 = 0, written to avoid cancellation
    s = math.sqrt(z * z + 8.0 * a)
    if z >= 0.0:
        return (z + s) / (4.0 * a)
    return 2.0 / (s - z)


@numba.njit(cache=True, nogil=True)
def _log_density_over_alpha(a, g, dg, h, sig, logc):
    n_int = g.shape[0] - 1
    x = a / h
    if x < n_int:
        i = int(x)
        u = x - i
        u2 = u * u
        u3 = u2 * u
        return ((2.0 * u3 - 3.0 * u2 + 1.0) * g[i] + (u3 - 2.0 * u2 + u) * h * dg[i]
                + (3.0 * u2 - 2.0 * u3) * g[i + 1] + (u3 - u2) * h * dg[i + 1])
    # beyond the table: direct sum over scale components
    top = -np.inf
    for j in range(sig.shape[0]):
        v = logc[j] - 0.5 * a * a / (sig[j] * sig[j])
        if v > top:
            top = v
    acc = 0.0
    for j in range(sig.shape[0]):
        acc += math.exp(logc[j] - 0.5 * a * a / (sig[j] * sig[j]) - top)
    return top + math.log(acc)


@numba.njit(cache=True, nogil=True)
def _log_integral(zz, ee, t, w, g, dg, h, sig, logc, width, xrel):
    s_lo = sig.min()
    s_hi = sig.max()
    a_lo = ee + 0.5 / (s_lo * s_lo)
    a_hi = ee + 0.5 / (s_hi * s_hi)
    spread = width / math.sqrt(2.0 * a_hi)
    p_hi = _tilted_peak(zz, a_hi)
    lo = max(0.0, _tilted_peak(zz, a_lo) - spread)
    # right of a peak p the log integrand falls by at least
    # x - log(1+x) with x = (alpha - p)/p, so a narrow peak near zero
    # (strongly negative z) needs only xrel * p
    hi = p_hi + min(spread, xrel * p_hi)
    mid = 0.5 * (hi + lo)
    half = 0.5 * (hi - lo)
    # reference level at the widest component's peak keeps exp() in range
    ref = p_hi * (zz - p_hi * ee) + math.log(p_hi) + _log_density_over_alpha(p_hi, g, dg, h, sig, logc)
    acc = 0.0
    for k in range(t.shape[0]):
        a = mid + half * t[k]
        v = a * (zz - a * ee) + _log_density_over_alpha(a, g, dg, h, sig, logc) - ref
        acc += w[k] * a * math.exp(v)
    return ref + math.log(acc * half)


@numba.njit(cache=True, nogil=True)
def _log_integrals(z, e, t, w, g, dg, h, sig, logc, width, xrel, out):
    for n in range(z.shape[0]):
        for m in range(z.shape[1]):
            out[n, m] = _log_integral(z[n, m], e[m], t, w, g, dg, h, sig, logc, width, xrel)


@numba.njit(cache=True, nogil=True)
def _pruned_argmax(z, e, t, w, g, dg, h, sig, logc, width, xrel, margin, out):
    M = z.shape[1]
    bound = np.empty(M)
    for n in range(z.shape[0]):
        for m in range(M):
            zp = max(z[n, m], 0.0)
            bound[m] = zp * zp / (4.0 * e[m])
        order = np.argsort(-bound, kind="mergesort")
        best = -np.inf
        arg = -1
        for j in range(M):
            m = order[j]
            if bound[m] < best - margin:
                break
            v = _log_integral(z[n, m], e[m], t, w, g, dg, h, sig, logc, width, xrel)
            if v > best or (v == best and m < arg):
                best = v
                arg = m
        out[n] = arg


def numeric_map_metric(features, c: Constellation, spec: FadingSpec,
                       q: QuadratureConfig = QuadratureConfig(),
                       noise_var: float = NOISE_VAR) -> np.ndarray:
    """MAP metric ``log int exp(a z_m - a^2 e_m) p(a) da`` by Gauss-Legendre quadrature.

    Per symbol and candidate, the ``node_count``-point rule is placed on the
    window where the integrand is non-negligible: a Rayleigh component of
    scale ``s`` tilts into a log-concave bump peaking at the root of
    ``2 a x^2 - z x - 1`` (``a = e + 1/(2 s^2)``) with curvature at least
    ``2a``, so ``q.window`` curvature radii around the extreme component
    peaks keep all but ``exp(-window^2/2)`` of the mass.  A peak ``p`` close to
    zero (strongly negative ``z``) is narrower still and the window ends at
    a fixed multiple of ``p``.  When the kernel is
    flat this window reaches roughly :func:`alpha_max`, the point where the
    density tail falls to ``q.tail_epsilon``; when it is sharp the window
    follows the kernel, including past ``alpha_max``.

    The :class:`RayleighUniformScale` density comes from its scale-wise
    Gauss-Legendre rule, tabulated on ``[0, alpha_max]`` for cubic Hermite
    interpolation and summed directly beyond.
    """
    z, e = matched_filter_stats(features, c, noise_var)
    h, g, dg, sig, logc = _density_table(spec, q)
    t, w = np.polynomial.legendre.leggauss(q.node_count)
    out = np.empty_like(z)
    _log_integrals(np.ascontiguousarray(z), np.ascontiguousarray(e, dtype=float),
                   t, w, g, dg, h, sig, logc, q.window, _relative_reach(q.window), out)
    return _check_finite(out)


def numeric_map_detect(features, c: Constellation, spec: FadingSpec,
                       q: QuadratureConfig = QuadratureConfig(),
                       noise_var: float = NOISE_VAR) -> np.ndarray:
    """Decisions of :func:`numeric_map_metric` without integrating every candidate.

    A density integrates to one, so each metric is bounded by the kernel
    peak ``max(z, 0)^2 / (4 e)``.  Candidates are visited in decreasing bound
    order and the scan stops once the bound falls below the best exact
    value, which leaves the decision (including tie-breaks) unchanged.
    """
    z, e = matched_filter_stats(features, c, noise_var)
    h, g, dg, sig, logc = _density_table(spec, q)
    t, w = np.polynomial.legendre.leggauss(q.node_count)
    out = np.empty(z.shape[0], dtype=np.int64)
    _pruned_argmax(np.ascontiguousarray(z), np.ascontiguousarray(e, dtype=float),
                   t, w, g, dg, h, sig, logc, q.window, _relative_reach(q.window), 1e-9, out)
    if np.any(out < 0):
        raise NumericalError("non-finite MAP metric")
    return out


# -- decisions ------------------------------------------------------------------

def map_detect(metric) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest message index."""
    metric = np.asarray(metric, dtype=float)
    _check_finite(metric)
    return np.argmax(metric, axis=-1)


def min_distance_detect(r, h: ChannelDraw, c: Constellation) -> np.ndarray:
    """Coherent detection with the channel known: ``argmin_m |r - h x_m|``."""
    r = np.atleast_1d(np.asarray(r))
    hh = np.atleast_1d(h.alpha * np.exp(1j * np.asarray(h.phase)))
    d = np.abs(r[:, None] - hh[:, None] * c.points[None, :])
    return np.argmin(d, axis=-1)


def estimate_scale_ml(d: PilotDataset, c: Constellation) -> float:
    """Rayleigh ML scale from per-pilot channel estimates ``r_i / x_i``.

    ``sigma^2 = sum |h_i|^2 / (2 N)``.  Noise is not removed, so the estimate
    is biased upwards by ``N0 * mean(1/|x_i|^2) / 2``.
    """
    if len(d) == 0:
        raise ValueError("empty pilot dataset")
    x = c.points[d.msgs]
    if np.any(np.abs(x) == 0):
        raise ValueError("pilot symbol with zero energy")
    h = d.received / x
    return math.sqrt(float(np.mean(np.abs(h) ** 2)) / 2.0)


def aggregate_scales(scales) -> float:
    """Pool per-user scale estimates: ``sigma^2 = mean(sigma_u^2)``."""
    s = np.asarray(scales, dtype=float)
    if s.size == 0:
        raise ValueError("no scale estimates to aggregate")
    return math.sqrt(float(np.mean(s**2)))
