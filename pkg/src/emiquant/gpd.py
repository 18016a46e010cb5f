"""Generalized Pareto primitives: survival, log-likelihood, censored MLE, quantile extrapolation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import counters
from .errors import ConvergenceFailure, DomainError, InsufficientExceedances

GAMMA_ZERO_TOL = 1e-8
# infeasible when 1 + gamma * z / sigma drops to this level
_SUPPORT_MARGIN = 1e-12
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class GpdParams:
    gamma: float
    sigma: float

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise DomainError("gamma must be finite")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise DomainError(f"sigma must be positive and finite, got {self.sigma!r}")


@dataclass(frozen=True)
class Exceedances:
    z: np.ndarray
    n_positive: int

    @property
    def positive(self):
        return self.z[self.z > 0]


@dataclass(frozen=True)
class MleConfig:
    """Settings of the profile-likelihood GPD fit.

    ``gamma_bounds`` is the search interval for the shape.  The lower end
    -0.45 keeps the estimator in its regular (asymptotically normal) regime.
    """

    gamma_bounds: tuple = (-0.45, 5.0)
    grid_size: int = 64
    gamma_tol: float = 1e-6
    max_iter: int = 200
    min_exceedances: int = 30
    gamma_zero_tol: float = GAMMA_ZERO_TOL
    polish: bool = True


def _check_sigma(sigma):
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")


def survival(params: GpdParams, z):
    """P(Z > z) for Z ~ GPD(gamma, sigma); zero beyond a finite endpoint."""
    _check_sigma(params.sigma)
    z = np.asarray(z, dtype=float)
    g, s = params.gamma, params.sigma
    if abs(g) < GAMMA_ZERO_TOL:
        out = np.exp(-z / s)
    else:
        base = 1.0 + g * z / s
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(base > 0, np.power(np.where(base > 0, base, 1.0), -1.0 / g), 0.0)
    return float(out) if out.ndim == 0 else out


def log_likelihood(params: GpdParams, z):
    """Per-observation GPD log-density; ``-inf`` outside the support."""
    _check_sigma(params.sigma)
    z = np.asarray(z, dtype=float)
    g, s = params.gamma, params.sigma
    if abs(g) < GAMMA_ZERO_TOL:
        out = -(z / s + math.log(s))
    else:
        w = g * z / s
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(
                w > -1.0,
                -((1.0 + g) / g * np.log1p(np.where(w > -1.0, w, 0.0)) + math.log(s)),
                -np.inf,
            )
    return float(out) if out.ndim == 0 else out


def censored_loglik(params: GpdParams, exc):
    """Sum of log-likelihood over the strictly positive exceedances only."""
    z = exc.positive if isinstance(exc, Exceedances) else np.asarray(exc, dtype=float)
    z = z[z > 0]
    return float(np.sum(log_likelihood(params, z)))


def exceedances(ys, u) -> Exceedances:
    z = np.maximum(np.asarray(ys, dtype=float) - u, 0.0)
    return Exceedances(z=z, n_positive=int(np.count_nonzero(z > 0)))


def extrapolate(q_tau0, params: GpdParams, tau0, tauN, gamma_zero_tol=GAMMA_ZERO_TOL):
    """GPD quantile inversion from the intermediate level tau0 up to tauN."""
    if not (0.0 < tau0 < 1.0 and 0.0 < tauN < 1.0):
        raise DomainError("quantile levels must lie in (0, 1)")
    if tauN < tau0:
        raise DomainError(f"tauN={tauN} is below tau0={tau0}")
    _check_sigma(params.sigma)
    log_ratio = math.log((1.0 - tau0) / (1.0 - tauN))
    g = params.gamma
    if abs(g) < gamma_zero_tol:
        return q_tau0 + params.sigma * log_ratio
    return q_tau0 + params.sigma * math.expm1(g * log_ratio) / g


def sample(params: GpdParams, size, rng):
    """Inverse-CDF draws.  ``rng`` is a ``numpy.random.Generator``."""
    u = 1.0 - rng.random(size)  # in (0, 1]
    if abs(params.gamma) < GAMMA_ZERO_TOL:
        return -params.sigma * np.log(u)
    return params.sigma * np.expm1(-params.gamma * np.log(u)) / params.gamma


# --- profile likelihood machinery (z rescaled to unit mean) -----------------


def _loglik_sum(g, s, z):
    """Censored log-likelihood at shape ``g`` and log-scale ``s``; vector-safe in ``g``/``s``."""
    g = np.asarray(g, dtype=float)[..., None]
    s = np.asarray(s, dtype=float)[..., None]
    sigma = np.exp(s)
    n = z.shape[0]
    w = g * z / sigma
    small = np.abs(g) < GAMMA_ZERO_TOL
    g_safe = np.where(small, 1.0, g)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.log1p(np.maximum(w, -1.0 + _SUPPORT_MARGIN))
        general = -((1.0 + g_safe) / g_safe * log_term).sum(axis=-1)
        expo = -(z / sigma).sum(axis=-1)
    ll = np.where(small[..., 0], expo, general) - n * s[..., 0]
    feasible = np.all(w > -1.0 + _SUPPORT_MARGIN, axis=-1) | small[..., 0]
    return np.where(feasible, ll, -np.inf)


def _sigma_bracket(g, zmax):
    """Analytic bracket (in log-scale) of the scale-score root; z has unit mean."""
    neg = g < 0
    lo_sigma = np.where(
        neg,
        np.maximum(-g * zmax / (1.0 - 1e-10), 1.0 + g),
        np.maximum(1.0 + g - g * zmax, 1e-12),
    )
    hi_sigma = np.where(neg, 1.0 + g - g * zmax, 1.0 + g)
    return np.log(lo_sigma), np.log(hi_sigma) + 1e-12


def _initial_log_sigma(g, lo, hi):
    # GPD mean is sigma / (1 - gamma); z has unit mean
    s0 = np.log(np.maximum(1.0 - g, 0.05))
    return np.where((s0 > lo) & (s0 < hi), s0, 0.5 * (lo + hi))


def _profile_log_sigma(g, z, zmax, max_iter=100, tol=1e-12):
    """Maximizing log-scale for each shape in ``g``.

    For fixed shape the scale score ``sum (1+g) z / (sigma + g z) - n`` is
    strictly decreasing in sigma, so its root is bracketed analytically and
    found by Newton steps safeguarded with bisection.
    """
    g = np.atleast_1d(np.asarray(g, dtype=float))
    n = z.shape[0]
    lo, hi = _sigma_bracket(g, zmax)
    s = _initial_log_sigma(g, lo, hi)
    gz = g[:, None] * z
    c = (1.0 + g)[:, None] * z
    for _ in range(max_iter):
        sigma = np.exp(s)[:, None]
        den = sigma + gz
        r = c / den
        f = r.sum(axis=1) - n
        fp = -(r * sigma / den).sum(axis=1)
        lo = np.where(f > 0, s, lo)
        hi = np.where(f > 0, hi, s)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(fp < 0, f / fp, 0.0)
        s_new = s - step
        outside = ~((s_new >= lo) & (s_new <= hi)) | ~np.isfinite(s_new)
        s_new = np.where(outside, 0.5 * (lo + hi), s_new)
        done = np.max(np.abs(s_new - s)) < tol
        s = s_new
        if done:
            break
    return s


def _profile_log_sigma_scalar(g, z, zmax, s0=None, max_iter=100, tol=1e-12):
    """Single-shape version of :func:`_profile_log_sigma` with a warm start."""
    n = z.shape[0]
    lo, hi = (float(v[0]) for v in _sigma_bracket(np.array([g]), zmax))
    if s0 is None or not lo < s0 < hi:
        s0 = float(_initial_log_sigma(g, lo, hi))
    s = s0
    gz = g * z
    c = (1.0 + g) * z
    for _ in range(max_iter):
        sigma = math.exp(s)
        den = sigma + gz
        r = c / den
        f = float(r.sum()) - n
        fp = -float((r / den).sum()) * sigma
        if f > 0:
            lo = s
        else:
            hi = s
        s_new = s - f / fp if fp < 0 else 0.5 * (lo + hi)
        if not (lo <= s_new <= hi):
            s_new = 0.5 * (lo + hi)
        if abs(s_new - s) < tol:
            return s_new
        s = s_new
    return s


def _profile(g, z, zmax, tol=1e-12):
    s = _profile_log_sigma(g, z, zmax, tol=tol)
    return s, _loglik_sum(g, s, z)


def _dloglik_dgamma(g, s, z):
    """Partial derivative of the summed log-likelihood in the shape."""
    sigma = math.exp(s)
    w = g * z / sigma
    return float(np.sum(np.log1p(w)) / g**2 - (1.0 + 1.0 / g) * np.sum((z / sigma) / (1.0 + w)))


def fit_mle(exc: Exceedances, cfg: MleConfig = MleConfig()) -> GpdParams:
    """Censored maximum-likelihood GPD fit over the strictly positive exceedances.

    A coarse grid over the shape, each point profiled over the scale, locates
    the best bracket; golden-section search refines the shape inside it, and
    a few secant steps on the shape score finish the job when the optimum is
    interior.
    """
    z = exc.positive
    n = z.shape[0]
    if n < cfg.min_exceedances:
        raise InsufficientExceedances(n, cfg.min_exceedances)
    counters.bump("mle")
    scale = float(np.mean(z))
    z = z / scale
    zmax = float(np.max(z))
    g_lo, g_hi = cfg.gamma_bounds

    grid = np.linspace(g_lo, g_hi, cfg.grid_size)
    s_grid, ll_grid = _profile(grid, z, zmax, tol=1e-6)
    if not np.any(np.isfinite(ll_grid)):
        raise ConvergenceFailure("profile likelihood is infeasible on the whole shape grid")
    k = int(np.argmax(ll_grid))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, grid.size - 1)]

    warm = [float(s_grid[k])]

    def prof(g):
        s = _profile_log_sigma_scalar(g, z, zmax, s0=warm[0])
        warm[0] = s
        return float(_loglik_sum(np.array([g]), np.array([s]), z)[0]), s

    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, sc = prof(c)
    fd, sd = prof(d)
    best = (float(ll_grid[k]), float(grid[k]), float(s_grid[k]))
    for it in range(cfg.max_iter):
        if b - a <= cfg.gamma_tol:
            break
        if fc >= fd:
            b, d, fd, sd = d, c, fc, sc
            c = b - _INV_PHI * (b - a)
            fc, sc = prof(c)
        else:
            a, c, fc, sc = c, d, fd, sd
            d = a + _INV_PHI * (b - a)
            fd, sd = prof(d)
    else:
        raise ConvergenceFailure(
            "golden-section search did not converge",
            best=GpdParams(best[1], math.exp(best[2]) * scale),
        )
    for f_, g_, s_ in ((fc, c, sc), (fd, d, sd)):
        if f_ > best[0]:
            best = (f_, g_, s_)
    ll, g, s = best

    interior = g_lo + 1e-6 < g < g_hi - 1e-6 and abs(g) > 1e-5
    if cfg.polish and interior:
        ll, g, s = _secant_polish(ll, g, s, z, zmax, g_lo, g_hi)

    if not math.isfinite(ll):
        raise ConvergenceFailure("non-finite likelihood at optimum", best=None)
    return GpdParams(gamma=float(g), sigma=float(math.exp(s) * scale))


def _secant_polish(ll, g, s, z, zmax, g_lo, g_hi, steps=6):
    g0, d0 = g, _dloglik_dgamma(g, s, z)
    g1 = g + (1e-6 if d0 > 0 else -1e-6)
    for _ in range(steps):
        if not (g_lo < g1 < g_hi) or abs(g1) < 1e-5:
            break
        s1 = _profile_log_sigma_scalar(g1, z, zmax, s0=s)
        d1 = _dloglik_dgamma(g1, s1, z)
        ll1 = float(_loglik_sum(np.array([g1]), np.array([s1]), z)[0])
        if ll1 >= ll:
            ll, g, s = ll1, g1, s1
        if d1 == d0 or abs(d1) < 1e-12:
            break
        g0, d0, g1 = g1, d1, g1 - d1 * (g1 - g0) / (d1 - d0)
    return ll, g, s
