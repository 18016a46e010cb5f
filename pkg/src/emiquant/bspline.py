"""B-spline bases, additive multi-covariate spline surfaces, and clamped evaluation.

Basis indices are 0-based: a knot vector with ``M`` knots and degree ``d``
carries ``J = M - d - 1`` basis functions indexed ``0 .. J-1``.

A surface over ``p`` covariates is additive across dimensions,

    f(x) = sum_i sum_j B_{j,d,xi_i}(x_i) t_j,

with a single coefficient vector ``t`` shared by all dimensions
(``mode="shared"``) or one vector per dimension (``mode="per_dim"``).
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateFeature, DomainError, SingularSystem

SPLINE_MODES = ("shared", "per_dim")


@dataclass(frozen=True)
class KnotVector:
    knots: np.ndarray
    degree: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).reshape(-1)
        if self.degree < 0:
            raise DomainError("degree must be non-negative")
        if knots.size < self.degree + 2:
            raise DomainError(f"need at least {self.degree + 2} knots, got {knots.size}")
        if np.any(np.diff(knots) < 0):
            raise DomainError("knots must be non-decreasing")
        if not np.all(np.isfinite(knots)):
            raise DomainError("knots must be finite")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "_knot_list", knots.tolist())
        nonempty = np.flatnonzero(knots[1:] > knots[:-1])
        object.__setattr__(self, "_last_span", int(nonempty[-1]) if nonempty.size else -1)

    @property
    def n_basis(self):
        return self.knots.size - self.degree - 1

    @property
    def lo(self):
        return float(self.knots[0])

    @property
    def hi(self):
        return float(self.knots[-1])

    @property
    def is_clamped(self):
        d = self.degree
        k = self.knots
        return bool(np.all(k[: d + 1] == k[0]) and np.all(k[-(d + 1):] == k[-1]))


def make_clamped_knots(values, degree=3, n_interior=6) -> KnotVector:
    """Clamped knots spanning ``values`` with interior knots at equally spaced empirical quantiles."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise DomainError("values must be non-empty")
    lo, hi = float(np.min(values)), float(np.max(values))
    if not lo < hi:
        raise DegenerateFeature(f"feature is constant ({lo!r}); cannot place knots")
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    interior = np.quantile(values, probs) if n_interior else np.empty(0)
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    return KnotVector(knots, degree)


def design_matrix(values, kv: KnotVector) -> np.ndarray:
    """Matrix of basis values, shape ``(len(values), J)``, via the Cox-de Boor recursion.

    Zero-denominator terms contribute zero.  The right endpoint of the knot
    range belongs to the last non-empty knot interval; points outside
    ``[knots[0], knots[-1]]`` give zero rows.
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    t = kv.knots
    # order-zero indicators on [t_i, t_{i+1})
    B = ((x[:, None] >= t[None, :-1]) & (x[:, None] < t[None, 1:])).astype(float)
    if kv._last_span >= 0:
        B[x == t[-1], kv._last_span] = 1.0
    for k in range(1, kv.degree + 1):
        m = t.size - 1 - k
        left_den = t[k : k + m] - t[:m]
        right_den = t[k + 1 : k + 1 + m] - t[1 : 1 + m]
        with np.errstate(divide="ignore", invalid="ignore"):
            w_left = np.where(left_den > 0, (x[:, None] - t[:m]) / left_den, 0.0)
            w_right = np.where(right_den > 0, (t[k + 1 : k + 1 + m] - x[:, None]) / right_den, 0.0)
        B = w_left * B[:, :m] + w_right * B[:, 1 : m + 1]
    return B


def basis(j, kv: KnotVector, x, degree=None) -> float:
    """Value of the ``j``-th (0-based) basis function of ``degree`` (default ``kv.degree``) at ``x``."""
    degree = kv.degree if degree is None else degree
    if degree != kv.degree:
        kv = KnotVector(kv.knots, degree)
    if not 0 <= j < kv.n_basis:
        raise DomainError(f"basis index {j} outside 0..{kv.n_basis - 1}")
    if not np.isfinite(x):
        raise DomainError("x must be finite")
    return float(design_matrix([x], kv)[0, j])


def nonzero_basis(kv: KnotVector, x):
    """``(first, values)``: the ``d+1`` possibly non-zero basis values at in-range ``x``.

    ``values[k]`` is basis function ``first + k``.  Requires clamped knots.
    """
    t = kv._knot_list
    d = kv.degree
    span = min(bisect.bisect_right(t, x) - 1, kv._last_span)
    N = [1.0] + [0.0] * d
    left = [0.0] * (d + 1)
    right = [0.0] * (d + 1)
    for j in range(1, d + 1):
        left[j] = x - t[span + 1 - j]
        right[j] = t[span + j] - x
        saved = 0.0
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            N[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        N[j] = saved
    return span - d, N


def nearest_value(sorted_values, x):
    """Element of ``sorted_values`` closest to ``x``; ties go to the smaller one."""
    i = bisect.bisect_left(sorted_values, x)
    if i == 0:
        return float(sorted_values[0])
    if i == len(sorted_values):
        return float(sorted_values[-1])
    below, above = sorted_values[i - 1], sorted_values[i]
    return float(below if x - below <= above - x else above)


@dataclass(frozen=True)
class Interpolator:
    dims: tuple
    coefficients: np.ndarray
    fallback_values: tuple
    degree: int
    mode: str = "shared"

    def __post_init__(self):
        if self.mode not in SPLINE_MODES:
            raise DomainError(f"unknown spline mode {self.mode!r}")
        J = {kv.n_basis for kv in self.dims}
        if len(J) != 1:
            raise DomainError("all knot vectors must carry the same number of basis functions")
        coef = np.asarray(self.coefficients, dtype=float)
        expected = (self.n_basis,) if self.mode == "shared" else (self.p, self.n_basis)
        if coef.shape != expected:
            raise DomainError(f"coefficient shape {coef.shape} != {expected}")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "_coef_list", coef.tolist())
        fb = tuple(tuple(sorted(float(v) for v in col)) for col in self.fallback_values)
        object.__setattr__(self, "fallback_values", fb)
        object.__setattr__(self, "dims", tuple(self.dims))

    @property
    def p(self):
        return len(self.dims)

    @property
    def n_basis(self):
        return self.dims[0].n_basis


def knots_for_features(features, degree=3, n_interior=6) -> List[KnotVector]:
    features = np.asarray(features, dtype=float)
    return [make_clamped_knots(features[:, i], degree, n_interior) for i in range(features.shape[1])]


def stacked_design(features, dims: Sequence[KnotVector], mode="shared"):
    features = np.asarray(features, dtype=float)
    mats = [design_matrix(features[:, i], kv) for i, kv in enumerate(dims)]
    return sum(mats) if mode == "shared" else np.hstack(mats)


def fit_coefficients(features, targets, dims: Sequence[KnotVector], mode="shared"):
    """Least-squares spline coefficients.

    ``shared`` minimizes ``||(sum_i B_i) t - targets||`` for one length-``J``
    vector; ``per_dim`` fits one vector per dimension from the horizontally
    stacked design and returns shape ``(p, J)``.  Full-rank systems are solved
    by Householder QR; rank-deficient ones get the minimum-norm solution.
    """
    if mode not in SPLINE_MODES:
        raise DomainError(f"unknown spline mode {mode!r}")
    if len({kv.n_basis for kv in dims}) != 1:
        raise DomainError("all knot vectors must carry the same number of basis functions")
    targets = np.asarray(targets, dtype=float).reshape(-1)
    A = stacked_design(features, dims, mode)
    if A.shape[0] == 0 or A.shape[0] != targets.shape[0]:
        raise DomainError("features and targets must be non-empty and of equal length")
    if not np.any(A):
        raise SingularSystem("summed design matrix is identically zero")
    coef = None
    if A.shape[0] >= A.shape[1]:
        Q, R = np.linalg.qr(A)
        diag = np.abs(np.diag(R))
        if diag.min() > 1e-10 * diag.max():
            coef = solve_triangular(R, Q.T @ targets)
    if coef is None:
        coef = np.linalg.lstsq(A, targets, rcond=None)[0]
    return coef if mode == "shared" else coef.reshape(len(dims), -1)


def fit_interpolator(features, targets, degree=3, n_interior=6, mode="shared", dims=None) -> Interpolator:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    if dims is None:
        dims = knots_for_features(features, degree, n_interior)
    coef = fit_coefficients(features, targets, dims, mode)
    return Interpolator(
        dims=tuple(dims),
        coefficients=coef,
        fallback_values=tuple(features[:, i] for i in range(features.shape[1])),
        degree=degree,
        mode=mode,
    )


def clamp(itp: Interpolator, x):
    """Replace out-of-range coordinates by their nearest offline value.

    Returns the clamped vector (list of floats) and the 0-based indices of
    the dimensions that were replaced.
    """
    if len(x) != itp.p:
        raise DomainError(f"covariate dimension {len(x)} != interpolator dimension {itp.p}")
    out = []
    clamped = []
    for i, (kv, v) in enumerate(zip(itp.dims, x)):
        v = float(v)
        if kv.lo <= v <= kv.hi:
            out.append(v)
        else:
            out.append(nearest_value(itp.fallback_values[i], v))
            clamped.append(i)
    return out, clamped


def local_bases(dims, xc):
    """Per-dimension ``(first, values)`` pairs for an already clamped point."""
    return [nonzero_basis(kv, v) for kv, v in zip(dims, xc)]


def combine(itp: Interpolator, bases) -> float:
    coef = itp._coef_list
    total = 0.0
    for i, (first, vals) in enumerate(bases):
        row = coef if itp.mode == "shared" else coef[i]
        for k, b in enumerate(vals):
            total += b * row[first + k]
    return total


def evaluate(itp: Interpolator, x) -> float:
    """Surface value at ``x`` with the nearest-offline-value fallback outside the knot range."""
    xc, _ = clamp(itp, x)
    return combine(itp, local_bases(itp.dims, xc))


def evaluate_many(itp: Interpolator, X) -> np.ndarray:
    """Vectorized :func:`evaluate` over the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != itp.p:
        raise DomainError(f"covariate dimension {X.shape[1]} != interpolator dimension {itp.p}")
    Xc = X.copy()
    for i, kv in enumerate(itp.dims):
        col = Xc[:, i]
        bad = (col < kv.lo) | (col > kv.hi)
        if np.any(bad):
            col[bad] = [nearest_value(itp.fallback_values[i], v) for v in col[bad]]
    A = stacked_design(Xc, itp.dims, itp.mode)
    return A @ itp.coefficients.reshape(-1)
