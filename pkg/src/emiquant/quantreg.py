"""Linear conditional quantile regression solved as a linear program.

The fit minimizes the empirical check loss

    sum_i rho_tau(y_i - alpha - beta' x_i)

through its LP form with split residuals lambda^+ / lambda^-.  The solver
returns both the primal solution and the multipliers of the equality and
nonnegativity constraints, so the optimality system can be verified
independently with :func:`kkt_residuals`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, sparse

from . import counters
from .errors import ConvergenceFailure, DomainError, InsufficientData, RankDeficient


@dataclass(frozen=True)
class Observation:
    """One (response, covariate vector) pair."""

    y: float
    x: tuple

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        if not (np.isfinite(self.y) and np.all(np.isfinite(x))):
            raise DomainError("observation entries must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))


def as_arrays(observations: Sequence[Observation]):
    """Stack observations into ``(X, y)`` arrays of shape (N, p) and (N,)."""
    if not observations:
        raise InsufficientData("no observations")
    p = len(observations[0].x)
    if any(len(o.x) != p for o in observations):
        raise DomainError("observations have inconsistent dimension")
    X = np.array([o.x for o in observations], dtype=float).reshape(len(observations), p)
    y = np.array([o.y for o in observations], dtype=float)
    return X, y


@dataclass(frozen=True, eq=False)
class QuantileFit:
    tau: float
    alpha: float
    beta: np.ndarray

    def __post_init__(self):
        _check_level(self.tau)
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))

    def __eq__(self, other):
        if not isinstance(other, QuantileFit):
            return NotImplemented
        return self.tau == other.tau and self.alpha == other.alpha and np.array_equal(self.beta, other.beta)

    __hash__ = None

    @property
    def p(self):
        return self.beta.shape[0]


@dataclass(frozen=True)
class LpSolution:
    """Primal solution plus multipliers of the quantile-regression LP.

    ``u`` are the equality multipliers and ``t_plus`` / ``t_minus`` the
    multipliers of ``lambda_plus >= 0`` / ``lambda_minus >= 0``.
    """

    fit: QuantileFit
    lambda_plus: np.ndarray
    lambda_minus: np.ndarray
    u: np.ndarray
    t_plus: np.ndarray
    t_minus: np.ndarray
    objective: float


@dataclass(frozen=True)
class SolverConfig:
    """LP tolerances.  ``max_iter=None`` leaves the simplex iteration cap to HiGHS."""

    primal_tol: float = 1e-9
    dual_tol: float = 1e-9
    max_iter: Optional[int] = None
    rank_tol: Optional[float] = None


@dataclass
class KktReport:
    primal_equality: float
    complementarity_plus: float
    complementarity_minus: float
    sum_u: float
    sum_u_x: float
    stationarity_plus: float
    stationarity_minus: float
    nonnegativity: float = 0.0
    families: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.families = {
            "primal_equality": self.primal_equality,
            "complementarity_plus": self.complementarity_plus,
            "complementarity_minus": self.complementarity_minus,
            "sum_u": self.sum_u,
            "sum_u_x": self.sum_u_x,
            "stationarity_plus": self.stationarity_plus,
            "stationarity_minus": self.stationarity_minus,
            "nonnegativity": self.nonnegativity,
        }

    @property
    def max_violation(self):
        return max(self.families.values())


def _check_level(tau):
    if not (0.0 < tau < 1.0):
        raise DomainError(f"quantile level must lie in (0, 1), got {tau!r}")


def check_loss(u, tau):
    """Check function rho_tau(u) = (tau - 1{u <= 0}) * u; works elementwise."""
    _check_level(tau)
    u = np.asarray(u, dtype=float)
    out = (tau - (u <= 0)) * u
    return float(out) if out.ndim == 0 else out


def predict_quantile(fit: QuantileFit, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != fit.p:
        raise DomainError(f"covariate dimension {x.shape[-1]} != model dimension {fit.p}")
    out = fit.alpha + x @ fit.beta
    return float(out) if np.ndim(out) == 0 else out


def _validate_design(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] != y.shape[0]:
        raise DomainError("X and y have different numbers of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DomainError("data must be finite")
    return X, y


def fit_qr(X, y, tau, solver_cfg: SolverConfig = SolverConfig()) -> LpSolution:
    """Fit alpha(tau), beta(tau) by solving the check-loss LP.

    The LP variables are ``[alpha, beta, lambda_plus, lambda_minus]`` with
    ``y = alpha + X beta + lambda_plus - lambda_minus``.  Multipliers come from
    the HiGHS dual simplex, so the returned point is a vertex and the
    complementarity products vanish exactly up to rounding.
    """
    _check_level(tau)
    X, y = _validate_design(X, y)
    n, p = X.shape
    if n < p + 1:
        raise InsufficientData(f"need at least {p + 1} observations, got {n}")
    design = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(design, tol=solver_cfg.rank_tol) < p + 1:
        raise RankDeficient("design matrix [1, X] is rank deficient")

    eye = sparse.identity(n, format="csc")
    A_eq = sparse.hstack([sparse.csc_matrix(design), eye, -eye], format="csc")
    c = np.concatenate([np.zeros(p + 1), np.full(n, tau), np.full(n, 1.0 - tau)])
    bounds = [(None, None)] * (p + 1) + [(0, None)] * (2 * n)
    options = {
        "primal_feasibility_tolerance": solver_cfg.primal_tol,
        "dual_feasibility_tolerance": solver_cfg.dual_tol,
    }
    if solver_cfg.max_iter is not None:
        options["maxiter"] = solver_cfg.max_iter

    counters.bump("lp")
    res = optimize.linprog(c, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs-ds", options=options)
    if res.status != 0:
        raise ConvergenceFailure(f"LP solver failed: {res.message}", best=res)

    coef = res.x[: p + 1]
    fit = QuantileFit(tau=tau, alpha=float(coef[0]), beta=coef[1:].copy())
    resid = y - design @ coef
    lam_plus = np.maximum(resid, 0.0)
    lam_minus = np.maximum(-resid, 0.0)
    reduced = res.lower.marginals
    return LpSolution(
        fit=fit,
        lambda_plus=lam_plus,
        lambda_minus=lam_minus,
        u=np.asarray(res.eqlin.marginals, dtype=float).copy(),
        t_plus=np.asarray(reduced[p + 1 : p + 1 + n], dtype=float).copy(),
        t_minus=np.asarray(reduced[p + 1 + n :], dtype=float).copy(),
        objective=float(np.sum(check_loss(resid, tau))),
    )


def kkt_residuals(sol: LpSolution, X, y, tau) -> KktReport:
    """Max absolute violation of each family of LP optimality conditions."""
    X, y = _validate_design(X, y)
    fit = sol.fit
    lp, lm, u, tp, tm = sol.lambda_plus, sol.lambda_minus, sol.u, sol.t_plus, sol.t_minus
    primal = y - fit.alpha - X @ fit.beta - lp + lm
    return KktReport(
        primal_equality=float(np.max(np.abs(primal))),
        complementarity_plus=float(np.max(np.abs(lp * tp))),
        complementarity_minus=float(np.max(np.abs(lm * tm))),
        sum_u=float(abs(np.sum(u))),
        sum_u_x=float(np.max(np.abs(u @ X))),
        stationarity_plus=float(np.max(np.abs(tau - u - tp))),
        stationarity_minus=float(np.max(np.abs(1.0 - tau + u - tm))),
        nonnegativity=float(max(0.0, -np.min(lp), -np.min(lm), -np.min(tp), -np.min(tm))),
    )
