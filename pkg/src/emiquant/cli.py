"""Command-line interface: ``emiquant {simulate,fit,predict,stream,backtest}``.

Exit codes: 0 success, 1 runtime or model failure, 2 usage or parse failure.
Numbers are written with ``repr`` so every float survives a text round trip.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import dataclass, replace

import numpy as np
import scipy

from . import __version__, simlab
from .bilevel import BilevelConfig, EXCEEDANCE_MODES
from .bspline import SPLINE_MODES
from .emi import THREADS_ENV, EmiConfig, Prediction, default_threads, fit_offline, load_model, predict, save_model
from .errors import DomainError, EmiError, OfflineFitFailure
from .gpd import MleConfig

PREDICTION_COLUMNS = ("q_tau0", "gamma_hat", "sigma_hat", "q_tauN", "flags")
BACKTEST_COLUMNS = ("t", "s", "q_tauN", "y", "status")


class ParseError(Exception):
    """Malformed input file; maps to exit code 2."""


class UsageError(Exception):
    """Inconsistent flags that argparse cannot catch; maps to exit code 2."""


@dataclass(frozen=True)
class BacktestConfig:
    window: int = 521
    stride: int = 4
    tau0: float = 0.8
    tauN: float = 0.99

    def validate(self, p):
        if self.stride < 1:
            raise UsageError("stride must be at least 1")
        if self.window <= p + 1:
            raise UsageError(f"window must exceed p + 1 = {p + 1}")


# --- file formats ---------------------------------------------------------


def _parse_cell(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"row {row}, column {col}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}, column {col}: value {text!r} is not finite")
    return v


def _check_header(header, with_y, path):
    header = [h.strip() for h in header]
    if with_y:
        if not header or header[0] != "y":
            raise ParseError(f"{path}: first header column must be 'y', got {header[:1]}")
        names = header[1:]
    else:
        names = header
    expected = [f"x{i}" for i in range(1, len(names) + 1)]
    if names != expected:
        raise ParseError(f"{path}: covariate columns must be {','.join(expected) or 'x1..xp'}, got {','.join(names)}")
    if not names:
        raise ParseError(f"{path}: no covariate columns")
    return header


def read_table(path, with_y=True):
    """Parse a dataset (``y,x1..xp``) or covariate (``x1..xp``) CSV.

    Returns ``(y, X)`` with ``y`` None for covariate files.  A file with no
    rows (or no bytes) gives an empty ``X``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            if with_y:
                raise ParseError(f"{path}: file is empty") from None
            return None, np.empty((0, 0))
        header = _check_header(header, with_y, path)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {line_no}: expected {len(header)} columns, found {len(row)}")
            rows.append([_parse_cell(c, line_no, header[j]) for j, c in enumerate(row)])
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    if with_y:
        return data[:, 0], data[:, 1:]
    return None, data


def _prediction_row(pred: Prediction):
    return [repr(pred.q_tau0), repr(pred.gamma_hat), repr(pred.sigma_hat), repr(pred.q_tauN), pred.flag_string()]


def _open_out(path):
    if path == "-":
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_sidecar(out_path, command, config, extra=None):
    """Write ``<out_path>.meta.json`` with the tool version and a config hash."""
    blob = json.dumps(config, sort_keys=True, default=str)
    meta = {
        "tool": "emiquant",
        "tool_version": __version__,
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
    }
    if extra:
        meta.update(extra)
    with open(f"{out_path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return meta


def _versions():
    return {"emiquant": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


# --- argument handling ----------------------------------------------------


def _probability(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1)")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return v


def _add_fit_flags(sp):
    g = sp.add_argument_group("offline fit")
    g.add_argument("--tau0", type=_probability, default=0.8, help="intermediate quantile level (default 0.8)")
    g.add_argument("--degree", type=int, default=3, help="spline degree (default 3)")
    g.add_argument("--n-interior", type=int, default=6, help="interior knots per covariate (default 6)")
    g.add_argument("--spline-mode", choices=SPLINE_MODES, default="shared")
    g.add_argument("--exceedance-mode", choices=EXCEEDANCE_MODES, default="query_threshold")
    g.add_argument("--min-exceedances", type=_positive_int, default=30)
    g.add_argument("--max-failure-fraction", type=float, default=0.2)
    g.add_argument("--sigma-floor", type=float, default=1e-6)
    g.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker threads for per-point tail fits (default ${THREADS_ENV} or 1)")


def _emi_config(args) -> EmiConfig:
    mle = replace(MleConfig(), min_exceedances=args.min_exceedances)
    return EmiConfig(
        bilevel=BilevelConfig(mle=mle, exceedance_mode=args.exceedance_mode),
        degree=args.degree,
        n_interior=args.n_interior,
        spline_mode=args.spline_mode,
        sigma_floor=args.sigma_floor,
        max_failure_fraction=args.max_failure_fraction,
        n_threads=args.threads or default_threads(),
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="emiquant", description="Extreme conditional quantiles via interpolated GPD tails.")
    parser.add_argument("--version", action="version", version=f"emiquant {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="replicated synthetic experiment, ARSE per method")
    sp.add_argument("--model", type=int, choices=(1, 2), default=1)
    sp.add_argument("--n-off", type=_positive_int, default=1000)
    sp.add_argument("--n-on", type=_positive_int, default=1000)
    sp.add_argument("--p", type=_positive_int, default=10)
    sp.add_argument("--tau-n", type=_probability, nargs="+", default=[0.99])
    sp.add_argument("--reps", type=_positive_int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--methods", nargs="+", choices=simlab.METHODS, default=["emi", "linear"])
    sp.add_argument("--stream-steps", type=int, default=0,
                    help="also run the incremental scenario for this many online steps (replication 0)")
    sp.add_argument("--out", required=True, help="output directory")
    _add_fit_flags(sp)

    sp = sub.add_parser("fit", help="offline fit from a y,x1..xp CSV")
    sp.add_argument("data")
    sp.add_argument("--out", required=True, help="model file (JSON)")
    _add_fit_flags(sp)

    sp = sub.add_parser("predict", help="predict from a x1..xp CSV")
    sp.add_argument("model")
    sp.add_argument("covariates")
    sp.add_argument("--tau-n", type=_probability, required=True)
    sp.add_argument("--out", default="-", help="output CSV (default stdout)")

    sp = sub.add_parser("stream", help="line-delimited CSV predictions on stdin/stdout")
    sp.add_argument("model")
    sp.add_argument("--tau-n", type=_probability, required=True)
    sp.add_argument("--no-header", action="store_true", help="do not write the output header line")

    sp = sub.add_parser("backtest", help="rolling-window fit and forecast over a time-ordered dataset")
    sp.add_argument("data")
    sp.add_argument("--window", type=_positive_int, default=521)
    sp.add_argument("--stride", type=_positive_int, default=4)
    sp.add_argument("--tau-n", type=_probability, default=0.99)
    sp.add_argument("--out", required=True)
    _add_fit_flags(sp)
    return parser


# --- commands -------------------------------------------------------------


def cmd_simulate(args):
    emi_cfg = _emi_config(args)
    try:
        cfg = simlab.SimConfig(
            model_id=args.model, n_off=args.n_off, n_on=args.n_on, p=args.p, tau0=args.tau0,
            tau_levels=tuple(args.tau_n), replications=args.reps, seed=args.seed,
            methods=tuple(args.methods), emi=emi_cfg,
        )
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    report = simlab.run_replications(cfg, progress=lambda r: print(f"replication {r + 1}/{cfg.replications}", file=sys.stderr))
    csv_path = os.path.join(args.out, "arse.csv")
    report.to_csv(csv_path)
    summary = [{"method": m, "tau_n": t, **s} for (m, t), s in report.summary().items()]
    outputs = {"arse": "arse.csv"}
    if args.stream_steps > 0:
        trace = simlab.streaming_scenario(cfg, replication=0, n_steps=args.stream_steps)
        simlab.write_records_csv(trace, os.path.join(args.out, "streaming.csv"))
        outputs["streaming"] = "streaming.csv"
    meta = {
        "tool_version": __version__,
        "versions": _versions(),
        "config": cfg.describe(),
        "config_hash": hashlib.sha256(json.dumps(cfg.describe(), sort_keys=True).encode()).hexdigest()[:16],
        "seeds": {"seed": cfg.seed, "replications": list(range(cfg.replications)), "streams": simlab.STREAMS},
        "rng": simlab.RNG_ALGORITHM,
        "outputs": outputs,
        "summary": summary,
    }
    with open(os.path.join(args.out, "metadata.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for row in summary:
        print(f"{row['method']:>14} tau_n={row['tau_n']}: mean ARSE {row['mean']:.6g} (median {row['median']:.6g}, n={row['n']})")
    return 0


def cmd_fit(args):
    y, X = read_table(args.data, with_y=True)
    cfg = _emi_config(args)
    try:
        model = fit_offline(X, y, args.tau0, cfg)
    except OfflineFitFailure as exc:
        print(f"error: offline fit failed: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, sort_keys=True), file=sys.stderr)
        return 1
    save_model(model, args.out)
    write_sidecar(args.out, "fit", cfg.to_dict(), {"data_sha256": _file_digest(args.data), "tau0": args.tau0})
    print(json.dumps(model.fit_report, indent=1, sort_keys=True))
    return 0


def _load(path):
    try:
        return load_model(path)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise EmiError(f"cannot load model {path}: {exc}") from None


def _check_level(model, tau_n):
    if not model.tau0 <= tau_n < 1.0:
        raise EmiError(f"tau-n {tau_n} is below the model's tau0 {model.tau0}")


def cmd_predict(args):
    model = _load(args.model)
    _check_level(model, args.tau_n)
    _, X = read_table(args.covariates, with_y=False)
    if X.shape[0] and X.shape[1] != model.p:
        raise EmiError(f"covariate file has {X.shape[1]} columns, model expects {model.p}")
    fh, close = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for row in X:
            w.writerow(_prediction_row(predict(model, row, args.tau_n)))
    finally:
        if close:
            fh.close()
    if close:
        write_sidecar(args.out, "predict", model.config.to_dict(),
                      {"tau_n": args.tau_n, "model_sha256": _file_digest(args.model)})
    return 0


def _stream_lines(lines, p):
    """Yield ``(item_no, vector or ParseError)`` per data line; blank and header lines are skipped."""
    header = [f"x{i}" for i in range(1, p + 1)]
    item = 0
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        cells = next(csv.reader([text]))
        if [c.strip() for c in cells] == header:
            continue
        item += 1
        try:
            yield item, [_parse_cell(c, line_no, f"x{j + 1}") for j, c in enumerate(cells)]
        except ParseError as exc:
            yield item, exc


def cmd_stream(args):
    model = _load(args.model)
    _check_level(model, args.tau_n)
    out = sys.stdout
    w = csv.writer(out, lineterminator="\n")
    if not args.no_header:
        w.writerow(PREDICTION_COLUMNS)
        out.flush()
    # one line in, one line out; nothing is buffered across items
    for item, x in _stream_lines(sys.stdin, model.p):
        try:
            if isinstance(x, ParseError):
                raise x
            w.writerow(_prediction_row(predict(model, x, args.tau_n)))
        except (ParseError, EmiError) as exc:
            w.writerow(["", "", "", "", f"error: {exc}"])
            print(f"warning: item {item}: {exc}", file=sys.stderr)
        out.flush()
    return 0


def cmd_backtest(args):
    y, X = read_table(args.data, with_y=True)
    T, p = X.shape
    bt = BacktestConfig(window=args.window, stride=args.stride, tau0=args.tau0, tauN=args.tau_n)
    bt.validate(p)
    if T < bt.window + bt.stride:
        raise EmiError(f"need at least window + stride = {bt.window + bt.stride} rows, got {T}")
    cfg = _emi_config(args)
    rows = []
    n_windows = n_failed = 0
    # 1-based t is the last row of the window; rows t-window+1..t pair y_s with x_{s-1}
    for t in range(bt.window, T - bt.stride + 1, bt.stride):
        start = t - bt.window
        ys = y[start + 1 : t]
        xs = X[start : t - 1]
        n_windows += 1
        try:
            model = fit_offline(xs, ys, bt.tau0, cfg)
            status = "ok"
        except EmiError as exc:
            model, status = None, f"error:{type(exc).__name__}"
            n_failed += 1
        for s in range(t, t + bt.stride):
            # 0-based s is 1-based row s+1, forecast from the covariate of row s
            q = predict(model, X[s - 1], bt.tauN).q_tauN if model else math.nan
            rows.append([t, s + 1, repr(float(q)), repr(float(y[s])), status])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BACKTEST_COLUMNS)
        w.writerows(rows)
    finite = [(float(r[2]), float(r[3])) for r in rows if r[4] == "ok"]
    rate = sum(yy > q for q, yy in finite) / len(finite) if finite else math.nan
    write_sidecar(args.out, "backtest", {"backtest": vars(bt), "emi": cfg.to_dict()}, {
        "data_sha256": _file_digest(args.data),
        "lag_pairing": "window rows t-window+1..t are paired as (y_s, x_{s-1}); the first row of each window "
                       "supplies only a covariate; forecasts for row s use x_{s-1}",
        "n_windows": n_windows,
        "n_failed_windows": n_failed,
        "exceedance_rate": rate,
    })
    print(f"{n_windows} windows, {n_failed} failed, {len(rows)} forecasts, exceedance rate {rate:.4f}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "stream": cmd_stream,
    "backtest": cmd_backtest,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ParseError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EmiError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
