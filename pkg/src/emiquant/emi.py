"""Offline fitting and online prediction of extreme conditional quantiles.

The offline stage fits the quantile regression at ``tau0`` once, solves the
tail problem at every offline covariate vector, and fits spline surfaces for
the shape and scale.  The resulting :class:`EmiModel` is frozen: prediction
for any number of new covariate vectors only evaluates the two surfaces and
the GPD quantile formula, with no LP or likelihood solves.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

import numpy as np

from . import __version__, bspline, gpd
from .bilevel import BilevelConfig, MpecProblem, solve_sequential
from .errors import ConvergenceFailure, DomainError, EmiError, InsufficientExceedances, OfflineFitFailure
from .quantreg import QuantileFit, SolverConfig, _validate_design, fit_qr

THREADS_ENV = "EMIQUANT_THREADS"
MODEL_FORMAT = "emiquant-model"
MODEL_VERSION = 1


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class EmiConfig:
    bilevel: BilevelConfig = BilevelConfig()
    degree: int = 3
    n_interior: int = 6
    spline_mode: str = "shared"
    sigma_floor: float = 1e-6
    max_failure_fraction: float = 0.2
    n_threads: int = field(default_factory=default_threads, compare=False)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("n_threads")
        d["bilevel"]["mle"]["gamma_bounds"] = list(self.bilevel.mle.gamma_bounds)
        return d

    @classmethod
    def from_dict(cls, d):
        b = d["bilevel"]
        mle = dict(b["mle"])
        mle["gamma_bounds"] = tuple(mle["gamma_bounds"])
        bilevel = BilevelConfig(
            solver=SolverConfig(**b["solver"]),
            mle=gpd.MleConfig(**mle),
            exceedance_mode=b["exceedance_mode"],
        )
        rest = {k: v for k, v in d.items() if k != "bilevel"}
        return cls(bilevel=bilevel, **rest)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Prediction:
    q_tau0: float
    gamma_hat: float
    sigma_hat: float
    q_tauN: float
    flags: frozenset = frozenset()

    def flag_string(self):
        return ";".join(sorted(self.flags))


@dataclass(frozen=True)
class StreamError:
    """In-stream record for an item that could not be predicted."""

    index: int
    message: str


@dataclass(frozen=True)
class EmiModel:
    qr: QuantileFit
    gamma_itp: bspline.Interpolator
    sigma_itp: bspline.Interpolator
    tau0: float
    config: EmiConfig
    fit_report: dict
    offline_gamma: np.ndarray
    offline_sigma: np.ndarray

    def __post_init__(self):
        if self.qr.tau != self.tau0:
            raise DomainError("quantile fit level differs from tau0")
        g, s = self.gamma_itp, self.sigma_itp
        if g.p != s.p or g.degree != s.degree or any(
            not np.array_equal(a.knots, b.knots) for a, b in zip(g.dims, s.dims)
        ):
            raise DomainError("shape and scale surfaces must share their knot structure")
        for arr in (self.offline_gamma, self.offline_sigma):
            arr.setflags(write=False)

    @property
    def p(self):
        return self.qr.p

    @property
    def offline_summary(self):
        return {
            "min": [kv.lo for kv in self.gamma_itp.dims],
            "max": [kv.hi for kv in self.gamma_itp.dims],
        }


def _tail_at(X, y, i, tau0, qr_sol, cfg):
    prob = MpecProblem(X=X, y=y, query_x=X[i], tau0=tau0)
    try:
        sol = solve_sequential(prob, cfg.bilevel, qr=qr_sol)
    except (InsufficientExceedances, ConvergenceFailure) as exc:
        return None, type(exc).__name__
    return sol.tail, None


def fit_offline(X, y, tau0, cfg: EmiConfig = EmiConfig()) -> EmiModel:
    """Offline stage: one shared quantile fit, per-point tail fits, two spline surfaces.

    Per-point tail fits that fail (too few exceedances or no convergence) are
    left out of the spline targets and counted in ``fit_report``.
    """
    X, y = _validate_design(X, y)
    n, p = X.shape
    dims = bspline.knots_for_features(X, cfg.degree, cfg.n_interior)
    J = dims[0].n_basis
    if n < max(p + 1, J):
        raise OfflineFitFailure(f"need at least {max(p + 1, J)} offline points, got {n}")
    qr_sol = fit_qr(X, y, tau0, cfg.bilevel.solver)

    if cfg.bilevel.exceedance_mode == "residual":
        # exceedances do not depend on the query, so one fit serves every point
        results = [_tail_at(X, y, 0, tau0, qr_sol, cfg)] * n
    elif cfg.n_threads > 1:
        with ThreadPoolExecutor(cfg.n_threads) as pool:
            results = list(pool.map(lambda i: _tail_at(X, y, i, tau0, qr_sol, cfg), range(n)))
    else:
        results = [_tail_at(X, y, i, tau0, qr_sol, cfg) for i in range(n)]

    gam = np.array([r[0].gamma if r[0] else np.nan for r in results])
    sig = np.array([r[0].sigma if r[0] else np.nan for r in results])
    ok = np.isfinite(gam)
    failures = {}
    for _, reason in results:
        if reason:
            failures[reason] = failures.get(reason, 0) + 1
    n_ok = int(ok.sum())
    diagnostics = {
        "n_offline": n,
        "n_success": n_ok,
        "n_failed": n - n_ok,
        "failure_fraction": (n - n_ok) / n,
        "failures": failures,
        "n_basis": J,
    }
    if n_ok < J or (n - n_ok) / n > cfg.max_failure_fraction:
        raise OfflineFitFailure(
            f"{n - n_ok} of {n} per-point tail fits failed "
            f"(fraction {(n - n_ok) / n:.3f}, limit {cfg.max_failure_fraction}; need {J} successes)",
            diagnostics,
        )

    Xok = X[ok]
    t_gamma = bspline.fit_coefficients(Xok, gam[ok], dims, cfg.spline_mode)
    t_sigma = bspline.fit_coefficients(Xok, sig[ok], dims, cfg.spline_mode)
    fallback = tuple(X[:, i] for i in range(p))
    gamma_itp = bspline.Interpolator(tuple(dims), t_gamma, fallback, cfg.degree, cfg.spline_mode)
    sigma_itp = bspline.Interpolator(tuple(dims), t_sigma, fallback, cfg.degree, cfg.spline_mode)

    A = bspline.stacked_design(Xok, dims, cfg.spline_mode)
    res_g = A @ t_gamma.reshape(-1) - gam[ok]
    res_s = A @ t_sigma.reshape(-1) - sig[ok]
    report = dict(
        diagnostics,
        gamma_residual_rms=float(np.sqrt(np.mean(res_g**2))),
        gamma_residual_max=float(np.max(np.abs(res_g))),
        sigma_residual_rms=float(np.sqrt(np.mean(res_s**2))),
        sigma_residual_max=float(np.max(np.abs(res_s))),
        qr_objective=qr_sol.objective,
    )
    return EmiModel(
        qr=qr_sol.fit,
        gamma_itp=gamma_itp,
        sigma_itp=sigma_itp,
        tau0=float(tau0),
        config=cfg,
        fit_report=report,
        offline_gamma=gam,
        offline_sigma=sig,
    )


def predict(model: EmiModel, x, tauN) -> Prediction:
    """Extreme conditional quantile at level ``tauN`` for one covariate vector.

    The intermediate quantile uses ``x`` as given; only the spline arguments
    are clamped to the offline range.
    """
    if not model.tau0 <= tauN < 1.0:
        raise DomainError(f"tauN must lie in [tau0={model.tau0}, 1), got {tauN!r}")
    x = [float(v) for v in x]
    if len(x) != model.p:
        raise DomainError(f"covariate dimension {len(x)} != model dimension {model.p}")
    if not all(math.isfinite(v) for v in x):
        raise DomainError("covariates must be finite")
    q0 = model.qr.alpha
    for b, v in zip(model.qr.beta.tolist(), x):
        q0 += b * v

    xc, clamped = bspline.clamp(model.gamma_itp, x)
    bases = bspline.local_bases(model.gamma_itp.dims, xc)
    g = bspline.combine(model.gamma_itp, bases)
    s = bspline.combine(model.sigma_itp, bases)

    flags = {f"clamped_dimension({i + 1})" for i in clamped}
    floor = model.config.sigma_floor
    if not s >= floor:
        s = floor
        flags.add("sigma_floored")
    tol = model.config.bilevel.mle.gamma_zero_tol
    if abs(g) < tol:
        flags.add("gamma_zero_branch")
    qN = gpd.extrapolate(q0, gpd.GpdParams(g, s), model.tau0, tauN, gamma_zero_tol=tol)
    return Prediction(q_tau0=q0, gamma_hat=g, sigma_hat=s, q_tauN=qN, flags=frozenset(flags))


def predict_many(model: EmiModel, X, tauN):
    return [predict(model, row, tauN) for row in np.asarray(X, dtype=float)]


def predict_stream(model: EmiModel, source: Iterable, tauN) -> Iterator[Union[Prediction, StreamError]]:
    """Lazily map covariate vectors to predictions, in order.

    Items that fail validation yield a :class:`StreamError` and the stream
    carries on.
    """
    for i, x in enumerate(source):
        try:
            yield predict(model, x, tauN)
        except (EmiError, ValueError, TypeError) as exc:
            yield StreamError(i, str(exc))


# --- serialization ------------------------------------------------------


def _floats(a):
    return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def _array(values):
    return np.array([np.nan if v is None else v for v in values], dtype=float)


def model_to_dict(model: EmiModel) -> dict:
    g, s = model.gamma_itp, model.sigma_itp
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "tool_version": __version__,
        "tau0": model.tau0,
        "qr": {"tau": model.qr.tau, "alpha": model.qr.alpha, "beta": _floats(model.qr.beta)},
        "spline": {
            "degree": g.degree,
            "mode": g.mode,
            "knots": [_floats(kv.knots) for kv in g.dims],
            "gamma_coefficients": np.asarray(g.coefficients).tolist(),
            "sigma_coefficients": np.asarray(s.coefficients).tolist(),
        },
        "fallback_values": [list(col) for col in g.fallback_values],
        "offline_summary": model.offline_summary,
        "offline_targets": {"gamma": _floats(model.offline_gamma), "sigma": _floats(model.offline_sigma)},
        "config": model.config.to_dict(),
        "config_digest": model.config.digest(),
        "fit_report": model.fit_report,
    }


def model_from_dict(d: dict) -> EmiModel:
    if d.get("format") != MODEL_FORMAT:
        raise DomainError("not an emiquant model document")
    if d.get("version") != MODEL_VERSION:
        raise DomainError(f"unsupported model version {d.get('version')!r}")
    sp = d["spline"]
    dims = tuple(bspline.KnotVector(np.array(k, dtype=float), sp["degree"]) for k in sp["knots"])
    fallback = tuple(d["fallback_values"])

    def itp(key):
        return bspline.Interpolator(dims, np.array(sp[key], dtype=float), fallback, sp["degree"], sp["mode"])

    qr = d["qr"]
    return EmiModel(
        qr=QuantileFit(tau=qr["tau"], alpha=qr["alpha"], beta=np.array(qr["beta"], dtype=float)),
        gamma_itp=itp("gamma_coefficients"),
        sigma_itp=itp("sigma_coefficients"),
        tau0=d["tau0"],
        config=EmiConfig.from_dict(d["config"]),
        fit_report=d["fit_report"],
        offline_gamma=_array(d["offline_targets"]["gamma"]),
        offline_sigma=_array(d["offline_targets"]["sigma"]),
    )


def save_model(model: EmiModel, path):
    # json writes floats with repr(), the shortest string that round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1, allow_nan=False)
        fh.write("\n")


def load_model(path) -> EmiModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
