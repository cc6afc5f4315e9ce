"""Command line entry point: ``distsi {simulate,analyze,multisplit,validate}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .engine import baseline_infer
from .errors import ConfigError, DistSIError, InvalidInputError
from .glm import Dataset, FamilySpec
from .lasso import PenaltySpec, lambda_candidates, tune_lambda
from .multisplit import MultisplitConfig, default_penalty, run_multisplit
from .protocol import run_protocol
from .sim import run_scenario

log = logging.getLogger("distsi")

REPORT_HEADER = ["coef", "name", "estimate", "stderr", "pvalue", "ci_lo", "ci_hi", "method"]
MULTISPLIT_HEADER = ["coef", "name", "pvalue", "reject"]


def _alpha(text):
    a = float(text)
    if not 0.0 < a < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return a


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="distsi", description="Distributed selective inference for sparse GLMs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, family=True):
        p.add_argument("--alpha", type=_alpha, default=None, help="significance level (default 0.1)")
        if family:
            p.add_argument("--family", choices=("gaussian", "logistic"), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda-scale", type=_positive, default=None,
                       help="penalty multiplier t in t*sqrt(2 log p)*sd(y)")

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory for metrics.csv and summary.csv")
    p.add_argument("--threads", type=int, default=None, help="worker processes (fallback: DISTSI_THREADS)")
    common(p)

    p = sub.add_parser("analyze", help="distributed inference on CSV datasets")
    p.add_argument("--central", required=True, help="holdout CSV seen only by the central node")
    p.add_argument("--local", required=True, nargs="+", help="one CSV per selecting node")
    p.add_argument("--tuning", default=None, help="CSV used only to tune the penalty level")
    p.add_argument("--out", default=None, help="report CSV (default: stdout)")
    common(p)

    p = sub.add_parser("multisplit", help="repeated-split p-values with quantile aggregation")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="TOML file with a [multisplit] table")
    p.add_argument("--out", default=None, help="p-value CSV (default: stdout)")
    common(p)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("--config", required=True)
    return parser


def read_csv(path):
    """Return ``(names, X, y)``; the last column is the response."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise InvalidInputError(f"{path}: not UTF-8 text") from exc
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise InvalidInputError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise InvalidInputError(f"{path}: need at least one predictor and a response column")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise InvalidInputError(f"{path}: line {i} has {len(r)} fields, header has {len(header)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(data)):
        raise InvalidInputError(f"{path}: non-finite values")
    return header[:-1], data[:, :-1], data[:, -1]


def _family(name, default="gaussian"):
    name = name or default
    if name == "gaussian":
        # real data: the noise level is unknown
        return FamilySpec("gaussian", 1.0, "estimate")
    return FamilySpec(name)


def _write_rows(out, header, rows):
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return format(x, ".17g")


def cmd_validate(args):
    cfg = load_config(args.config)
    parts = [name for name in ("scenario", "multisplit") if getattr(cfg, name) is not None]
    print(f"{args.config}: ok ({', '.join(parts)})")
    return 0


def cmd_simulate(args):
    cfg = load_config(args.config).scenario
    if cfg is None:
        raise ConfigError(f"{args.config}: no [scenario] table")
    overrides = {k: v for k, v in dict(alpha=args.alpha, family=args.family, seed=args.seed,
                                       lambda_scale=args.lambda_scale).items() if v is not None}
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    result = run_scenario(cfg, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.rows_csv(), encoding="utf-8")
    (out / "summary.csv").write_text(result.summary_csv(), encoding="utf-8")
    for e in result.errors:
        print(f"warning: {e}", file=sys.stderr)
    return 0


def _analyze_penalty(args, central, n_total, family):
    if args.tuning is not None:
        _, Xt, yt = read_csv(args.tuning)
        if Xt.shape[1] != central.p:
            raise InvalidInputError(f"{args.tuning}: {Xt.shape[1]} predictors, expected {central.p}")
        half = yt.size // 2
        if half < 2:
            raise InvalidInputError(f"{args.tuning}: too few rows to tune")
        return tune_lambda(Dataset(Xt[:half], yt[:half]), Dataset(Xt[half:], yt[half:]), family, n_total=n_total)
    t = 1.0 if args.lambda_scale is None else args.lambda_scale
    return PenaltySpec.uniform(lambda_candidates(central.y, central.p, [t])[0], central.p)


def analyze(central_path, local_paths, family, alpha=0.1, *, tuning=None, lambda_scale=None):
    """Library form of ``distsi analyze``: returns ``(names, [dist-si report, splitting report])``."""
    names, X0, y0 = read_csv(central_path)
    nodes = [Dataset(X0, y0, 0)]
    for k, path in enumerate(local_paths, start=1):
        nk, Xk, yk = read_csv(path)
        if nk != names:
            raise InvalidInputError(f"{path}: columns differ from {central_path}")
        nodes.append(Dataset(Xk, yk, k))
    for d in nodes:
        d.check_family(family)
    n_total = sum(d.n for d in nodes)
    args = argparse.Namespace(tuning=tuning, lambda_scale=lambda_scale)
    penalty = _analyze_penalty(args, nodes[0], n_total, family)
    res = run_protocol(nodes, family, penalty, alpha=alpha)
    split = baseline_infer("splitting", X0[:, res.E], y0, family, alpha, coef=res.E)
    return names, [res.report, split]


def cmd_analyze(args):
    family = _family(args.family)
    alpha = 0.1 if args.alpha is None else args.alpha
    names, reports = analyze(args.central, args.local, family, alpha,
                             tuning=args.tuning, lambda_scale=args.lambda_scale)
    rows = []
    for rep in reports:
        for j, est, se, pv, lo, hi, method in rep.rows():
            rows.append([j, names[j], _fmt(est), _fmt(se), _fmt(pv), _fmt(lo), _fmt(hi), method])
    _write_rows(args.out, REPORT_HEADER, rows)
    return 0


def cmd_multisplit(args):
    cfg = MultisplitConfig()
    if args.config is not None:
        loaded = load_config(args.config).multisplit
        if loaded is None:
            raise ConfigError(f"{args.config}: no [multisplit] table")
        cfg = loaded
    overrides = {k: v for k, v in dict(alpha=args.alpha, seed=args.seed,
                                       lambda_scale=args.lambda_scale).items() if v is not None}
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    names, X, y = read_csv(args.data)
    family = _family(args.family)
    data = Dataset(X, y, 0)
    data.check_family(family)
    agg, reject = run_multisplit(data, cfg, family, default_penalty(data, cfg))
    rows = [[j, names[j], _fmt(agg[j]), int(reject[j])] for j in range(len(names))]
    _write_rows(args.out, MULTISPLIT_HEADER, rows)
    return 0


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "multisplit": cmd_multisplit, "validate": cmd_validate}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, which matches the config-error code
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except DistSIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
