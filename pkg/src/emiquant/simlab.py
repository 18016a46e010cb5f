"""Synthetic experiments: data models, true-quantile oracles, ARSE, baselines, replications.

Random streams come from numpy's PCG64 bit generator seeded by
``SeedSequence(entropy=(seed, stream, replication))`` with ``stream`` 0 for
offline and 1 for online data, so every (seed, which, replication) triple
owns an independent, reproducible stream.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from . import counters, gpd
from .bilevel import MpecProblem, solve_sequential
from .emi import EmiConfig, fit_offline, predict
from .errors import ConvergenceFailure, DomainError, EmiError, InsufficientExceedances
from .quantreg import fit_qr, predict_quantile

RNG_ALGORITHM = "numpy PCG64, SeedSequence(entropy=(seed, stream, replication)); stream 0=offline, 1=online"
STREAMS = {"offline": 0, "online": 1}
METHODS = ("emi", "linear", "emi_no_interp")
MODEL2_LOCATION = 1.0
MODEL2_SCALE = 0.25


@dataclass(frozen=True)
class SimConfig:
    model_id: int = 1
    n_off: int = 1000
    n_on: int = 1000
    p: int = 10
    tau0: float = 0.8
    tau_levels: tuple = (0.99,)
    replications: int = 100
    seed: int = 0
    eta1: Optional[tuple] = None
    eta2: Optional[tuple] = None
    alpha: float = 0.5
    beta: Optional[tuple] = None
    methods: tuple = ("emi", "linear")
    emi: EmiConfig = field(default_factory=EmiConfig)

    def __post_init__(self):
        if self.model_id not in (1, 2):
            raise DomainError(f"model_id must be 1 or 2, got {self.model_id!r}")
        if self.n_off < 1 or self.n_on < 1 or self.p < 1 or self.replications < 1:
            raise DomainError("sizes must be positive")
        levels = tuple(float(t) for t in np.atleast_1d(self.tau_levels))
        if not levels or not all(0.0 < self.tau0 < t < 1.0 for t in levels):
            raise DomainError("need 0 < tau0 < tauN < 1 for every level")
        object.__setattr__(self, "tau_levels", levels)
        for name, default in (("eta1", 0.2), ("eta2", 0.6), ("beta", 0.5)):
            v = getattr(self, name)
            v = np.full(self.p, default) if v is None else np.broadcast_to(np.asarray(v, dtype=float), (self.p,))
            object.__setattr__(self, name, tuple(float(a) for a in v))
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise DomainError(f"unknown methods {sorted(unknown)}")

    def describe(self):
        return {
            "model_id": self.model_id,
            "n_off": self.n_off,
            "n_on": self.n_on,
            "p": self.p,
            "tau0": self.tau0,
            "tau_levels": list(self.tau_levels),
            "replications": self.replications,
            "seed": self.seed,
            "eta1": list(self.eta1),
            "eta2": list(self.eta2),
            "alpha": self.alpha,
            "beta": list(self.beta),
            "methods": list(self.methods),
            "emi": self.emi.to_dict(),
            "rng": RNG_ALGORITHM,
        }


@dataclass(frozen=True)
class SimData:
    X: np.ndarray
    y: np.ndarray
    noise: np.ndarray
    noise_param: np.ndarray  # t degrees of freedom (model 1) or GPD shape (model 2)


def rng_for(cfg: SimConfig, which, replication):
    if which not in STREAMS:
        raise DomainError(f"which must be 'offline' or 'online', got {which!r}")
    ss = np.random.SeedSequence(entropy=(cfg.seed, STREAMS[which], replication))
    return np.random.Generator(np.random.PCG64(ss))


def noise_parameter(cfg: SimConfig, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if cfg.model_id == 1:
        return np.exp(X @ np.asarray(cfg.eta1))
    lin = X @ np.asarray(cfg.eta2)
    if np.any(lin <= 0):
        raise DomainError("model 2 needs eta2'x > 0")
    return 1.0 / lin


def draw_noise(cfg: SimConfig, param, rng):
    """Model 1: |T(df)| via normal over sqrt(chi2/df).  Model 2: GPD(1, 0.25, shape)."""
    param = np.asarray(param, dtype=float)
    if cfg.model_id == 1:
        z = rng.standard_normal(param.shape)
        chi2 = rng.chisquare(param)
        return np.abs(z / np.sqrt(chi2 / param))
    u = 1.0 - rng.random(param.shape)
    return MODEL2_LOCATION + MODEL2_SCALE * np.expm1(-param * np.log(u)) / param


def generate(cfg: SimConfig, which, replication=0) -> SimData:
    rng = rng_for(cfg, which, replication)
    n = cfg.n_off if which == "offline" else cfg.n_on
    X = rng.random((n, cfg.p))
    param = noise_parameter(cfg, X)
    eps = draw_noise(cfg, param, rng)
    y = cfg.alpha + X @ np.asarray(cfg.beta) + eps
    return SimData(X=X, y=y, noise=eps, noise_param=param)


def _folded_t_quantile(df, tau):
    target = 0.5 * (1.0 + tau)
    hi = 1.0
    while special.stdtr(df, hi) < target:
        hi *= 2.0
    return optimize.brentq(lambda q: special.stdtr(df, q) - target, 0.0, hi, xtol=1e-14, rtol=1e-15)


def noise_quantile(cfg: SimConfig, X, tau):
    if not 0.0 < tau < 1.0:
        raise DomainError("tau must lie in (0, 1)")
    param = noise_parameter(cfg, X)
    if cfg.model_id == 1:
        return np.array([_folded_t_quantile(df, tau) for df in param])
    return MODEL2_LOCATION + MODEL2_SCALE * np.expm1(-param * math.log1p(-tau)) / param


def true_quantile(cfg: SimConfig, X, tau):
    """True conditional quantile of y at level ``tau``; one value per row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return cfg.alpha + X @ np.asarray(cfg.beta) + noise_quantile(cfg, X, tau)


def arse(predicted, truth):
    """Average relative squared error, mean((predicted / truth - 1)^2)."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise DomainError("predicted and truth must have the same length")
    if np.any(truth == 0):
        raise DomainError("truth contains zeros")
    return float(np.mean((predicted / truth - 1.0) ** 2))


def baseline_linear(X_on, y_on, tauN, solver_cfg=None):
    """Direct quantile regression at the extreme level on the given observations."""
    kw = {} if solver_cfg is None else {"solver_cfg": solver_cfg}
    sol = fit_qr(X_on, y_on, tauN, **kw)
    return predict_quantile(sol.fit, np.asarray(X_on, dtype=float)), sol


def baseline_emi_no_interp(X, y, queries, tau0, tau_levels, cfg: EmiConfig = EmiConfig(), qr=None):
    """Fresh tail fit at every query point, then GPD extrapolation, without interpolation.

    Returns an array of shape ``(len(queries), len(tau_levels))``; rows whose
    tail fit failed are NaN.
    """
    tau_levels = tuple(np.atleast_1d(tau_levels))
    if qr is None:
        qr = fit_qr(X, y, tau0, cfg.bilevel.solver)
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    out = np.full((queries.shape[0], len(tau_levels)), np.nan)
    for i, xq in enumerate(queries):
        prob = MpecProblem(X=np.asarray(X, dtype=float), y=np.asarray(y, dtype=float), query_x=xq, tau0=tau0)
        try:
            sol = solve_sequential(prob, cfg.bilevel, qr=qr)
        except (InsufficientExceedances, ConvergenceFailure):
            continue
        tol = cfg.bilevel.mle.gamma_zero_tol
        out[i] = [gpd.extrapolate(sol.threshold, sol.tail, tau0, t, tol) for t in tau_levels]
    return out


@dataclass
class ArseReport:
    """Per-replication ARSE for each (method, tauN), plus the run's row log."""

    rows: list
    config: dict

    def values(self, method, tau_n):
        return np.array([r["arse"] for r in self.rows if r["method"] == method and r["tau_n"] == tau_n])

    def summary(self):
        out = {}
        keys = sorted({(r["method"], r["tau_n"]) for r in self.rows})
        for key in keys:
            v = self.values(*key)
            v = v[np.isfinite(v)]
            if v.size == 0:
                out[key] = {"mean": math.nan, "median": math.nan, "q1": math.nan, "q3": math.nan, "n": 0}
                continue
            q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
            out[key] = {"mean": float(np.mean(v)), "median": float(med), "q1": float(q1), "q3": float(q3), "n": int(v.size)}
        return out

    def mean(self, method, tau_n):
        return self.summary()[(method, tau_n)]["mean"]

    def to_csv(self, path):
        cols = ["replication", "method", "tau_n", "arse", "n_eval", "n_failed", "status"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in cols})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _replication_rows(cfg: SimConfig, rep):
    off = generate(cfg, "offline", rep)
    on = generate(cfg, "online", rep)
    truth = {t: true_quantile(cfg, on.X, t) for t in cfg.tau_levels}
    rows = []

    def add(method, t, est, status="ok"):
        est = np.asarray(est, dtype=float)
        good = np.isfinite(est)
        value = arse(est[good], truth[t][good]) if good.any() else math.nan
        rows.append(dict(replication=rep, method=method, tau_n=t, arse=value,
                         n_eval=int(good.sum()), n_failed=int((~good).sum()), status=status))

    def fail(method, exc):
        for t in cfg.tau_levels:
            rows.append(dict(replication=rep, method=method, tau_n=t, arse=math.nan,
                             n_eval=0, n_failed=cfg.n_on, status=f"error:{type(exc).__name__}"))

    qr_off = None
    for method in cfg.methods:
        try:
            if method == "emi":
                model = fit_offline(off.X, off.y, cfg.tau0, cfg.emi)
                for t in cfg.tau_levels:
                    add(method, t, [predict(model, x, t).q_tauN for x in on.X])
            elif method == "linear":
                for t in cfg.tau_levels:
                    add(method, t, baseline_linear(on.X, on.y, t, cfg.emi.bilevel.solver)[0])
            elif method == "emi_no_interp":
                if qr_off is None:
                    qr_off = fit_qr(off.X, off.y, cfg.tau0, cfg.emi.bilevel.solver)
                est = baseline_emi_no_interp(off.X, off.y, on.X, cfg.tau0, cfg.tau_levels, cfg.emi, qr=qr_off)
                for k, t in enumerate(cfg.tau_levels):
                    add(method, t, est[:, k])
        except EmiError as exc:
            fail(method, exc)
    return rows


def run_replications(cfg: SimConfig, progress=None) -> ArseReport:
    """Generate, fit, predict and score every method in every replication.

    A failing method in one replication is recorded with NaN ARSE and an
    ``error:<Type>`` status; the run continues.
    """
    rows = []
    for rep in range(cfg.replications):
        rows.extend(_replication_rows(cfg, rep))
        if progress:
            progress(rep)
    return ArseReport(rows=rows, config=cfg.describe())


def streaming_scenario(cfg: SimConfig, replication=0, tau_n=None, n_steps=None):
    """Online data arriving one point at a time on top of the offline set.

    At step t the observation set is the offline data plus the first t online
    points.  Linear refits at ``tau_n`` on that set, EMI without interpolation
    refits the intermediate quantile regression and the tail at ``x_t``, and
    EMI predicts from the model frozen after the offline stage.  Each record
    carries estimates, the true quantile, and per-method wall time and
    solver-call counts.
    """
    tau_n = cfg.tau_levels[0] if tau_n is None else tau_n
    off = generate(cfg, "offline", replication)
    on = generate(cfg, "online", replication)
    steps = cfg.n_on if n_steps is None else min(n_steps, cfg.n_on)
    solver = cfg.emi.bilevel.solver
    methods = cfg.methods
    model = fit_offline(off.X, off.y, cfg.tau0, cfg.emi) if "emi" in methods else None
    X_acc = [row for row in off.X]
    y_acc = list(off.y)
    records = []
    for t in range(steps):
        x_t = on.X[t]
        X_acc.append(x_t)
        y_acc.append(on.y[t])
        Xa = np.asarray(X_acc)
        ya = np.asarray(y_acc)
        rec = {"step": t + 1, "n_obs": len(y_acc), "truth": float(true_quantile(cfg, x_t, tau_n)[0]),
               "y": float(on.y[t])}
        for method in methods:
            before = counters.snapshot()
            start = time.perf_counter()
            try:
                if method == "emi":
                    est = predict(model, x_t, tau_n).q_tauN
                elif method == "linear":
                    sol = fit_qr(Xa, ya, tau_n, solver)
                    est = predict_quantile(sol.fit, x_t)
                else:
                    est = float(baseline_emi_no_interp(Xa, ya, x_t, cfg.tau0, (tau_n,), cfg.emi)[0, 0])
            except EmiError:
                est = math.nan
            elapsed = time.perf_counter() - start
            after = counters.snapshot()
            rec[f"{method}_estimate"] = float(est)
            rec[f"{method}_seconds"] = elapsed
            rec[f"{method}_lp_calls"] = after["lp"] - before["lp"]
            rec[f"{method}_mle_calls"] = after["mle"] - before["mle"]
        records.append(rec)
    return records


def write_records_csv(records: Sequence[dict], path):
    if not records:
        cols = ["step"]
    else:
        cols = list(records[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: _fmt(v) for k, v in r.items()})
