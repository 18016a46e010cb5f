"""Joint (alpha, beta, gamma, sigma) estimation at a query covariate.

The lower level is the quantile-regression LP, whose objective does not
involve the tail parameters, so the equilibrium-constrained program is
solved exactly in two stages: fit the LP, then maximize the censored GPD
likelihood of the exceedances over the induced threshold.
:func:`verify` checks the result against the full optimality system of the
combined problem (LP KKT conditions, complementarity, and stationarity of
the upper-level likelihood).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import gpd
from .errors import DomainError
from .quantreg import KktReport, LpSolution, SolverConfig, _validate_design, fit_qr, kkt_residuals, predict_quantile

EXCEEDANCE_MODES = ("query_threshold", "residual")
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class BilevelConfig:
    solver: SolverConfig = SolverConfig()
    mle: gpd.MleConfig = gpd.MleConfig()
    exceedance_mode: str = "query_threshold"

    def __post_init__(self):
        if self.exceedance_mode not in EXCEEDANCE_MODES:
            raise DomainError(f"unknown exceedance mode {self.exceedance_mode!r}")


@dataclass(frozen=True)
class MpecProblem:
    X: np.ndarray
    y: np.ndarray
    query_x: np.ndarray
    tau0: float


@dataclass(frozen=True)
class MpecSolution:
    qr: LpSolution
    tail: gpd.GpdParams
    threshold: float
    n_exceedances: int


@dataclass
class VerificationReport:
    kkt: KktReport
    gradient: float
    feasible: bool
    at_boundary: bool
    tolerances: dict = field(default_factory=lambda: {"kkt": 1e-8, "gradient": 1e-4})

    @property
    def stationarity_checked(self):
        return not self.at_boundary

    @property
    def passed(self):
        ok = self.kkt.max_violation <= self.tolerances["kkt"] and self.feasible
        if self.stationarity_checked:
            ok = ok and self.gradient <= self.tolerances["gradient"]
        return ok


def assemble(X, y, query_x, tau0) -> MpecProblem:
    X, y = _validate_design(X, y)
    q = np.asarray(query_x, dtype=float).reshape(-1)
    if q.shape[0] != X.shape[1]:
        raise DomainError(f"query dimension {q.shape[0]} != data dimension {X.shape[1]}")
    if not np.all(np.isfinite(q)):
        raise DomainError("query covariates must be finite")
    if not 0.0 < tau0 < 1.0:
        raise DomainError(f"tau0 must lie in (0, 1), got {tau0!r}")
    return MpecProblem(X=X, y=y, query_x=q, tau0=float(tau0))


def tail_exceedances(prob: MpecProblem, qr: LpSolution, mode="query_threshold"):
    """Exceedances feeding the upper level and the threshold at the query point.

    ``query_threshold`` measures every raw response against the single level
    ``alpha + beta' query_x``.  ``residual`` uses per-observation thresholds
    ``alpha + beta' x_i`` instead (and so does not depend on the query).
    """
    threshold = predict_quantile(qr.fit, prob.query_x)
    if mode == "query_threshold":
        z = prob.y - threshold
    elif mode == "residual":
        z = prob.y - predict_quantile(qr.fit, prob.X)
    else:
        raise DomainError(f"unknown exceedance mode {mode!r}")
    # responses within rounding of the fitted hyperplane are ties, not exceedances
    tie = TIE_RTOL * max(1.0, float(np.max(np.abs(prob.y))))
    z = np.where(z > tie, z, 0.0)
    return threshold, gpd.Exceedances(z=z, n_positive=int(np.count_nonzero(z)))


def solve_sequential(prob: MpecProblem, cfg: BilevelConfig = BilevelConfig(), qr: Optional[LpSolution] = None):
    """Solve the bilevel problem at ``prob.query_x``.

    Pass a precomputed ``qr`` (an LP solution for the same data and tau0) to
    share one lower-level fit across many query points.
    """
    if qr is None:
        qr = fit_qr(prob.X, prob.y, prob.tau0, cfg.solver)
    elif qr.fit.tau != prob.tau0:
        raise DomainError("shared quantile fit was computed at a different level")
    threshold, exc = tail_exceedances(prob, qr, cfg.exceedance_mode)
    tail = gpd.fit_mle(exc, cfg.mle)
    return MpecSolution(qr=qr, tail=tail, threshold=threshold, n_exceedances=exc.n_positive)


def loglik_gradient(tail: gpd.GpdParams, z, step=1e-6):
    """Central-difference gradient of the censored log-likelihood in (gamma, log sigma)."""
    g, s = tail.gamma, math.log(tail.sigma)

    def f(gg, ss):
        return gpd.censored_loglik(gpd.GpdParams(gg, math.exp(ss)), z)

    dg = (f(g + step, s) - f(g - step, s)) / (2 * step)
    ds = (f(g, s + step) - f(g, s - step)) / (2 * step)
    return np.array([dg, ds])


def verify(sol: MpecSolution, prob: MpecProblem, cfg: BilevelConfig = BilevelConfig(), boundary_tol=1e-6):
    kkt = kkt_residuals(sol.qr, prob.X, prob.y, prob.tau0)
    _, exc = tail_exceedances(prob, sol.qr, cfg.exceedance_mode)
    z = exc.positive
    g, sigma = sol.tail.gamma, sol.tail.sigma
    feasible = bool(np.all(1.0 + g * z / sigma > 0))
    lo, hi = cfg.mle.gamma_bounds
    at_boundary = g <= lo + boundary_tol or g >= hi - boundary_tol
    gradient = float(np.max(np.abs(loglik_gradient(sol.tail, z)))) if feasible else math.inf
    return VerificationReport(kkt=kkt, gradient=gradient, feasible=feasible, at_boundary=at_boundary)
