"""Command-line front end.

Sub-commands: ``simulate``, ``run``, ``oracle``, ``bench``. Results go to
files; stdout carries a one-line summary.

Exit codes: 0 success, 2 usage error, 3 sampler failure, 4 oracle
cardinality cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .datagen import SimSpec, read_dataset, simulate, write_dataset
from .exceptions import BilevelError, InputError, SamplerError, UnsupportedError
from .marglik import ALA, LA, MarglikEvaluator
from .model import LINKS, PROBIT, PriorConfig
from .oracle import compare, enumerate_posterior, write_report
from .smc import SCHEMA_VERSION, SmcConfig, run, sample_prior

EXIT_OK, EXIT_USAGE, EXIT_SAMPLER, EXIT_ORACLE_CAP = 0, 2, 3, 4
WORKERS_ENV = "BILEVEL_SMC_WORKERS"
DATA_NAME = "data.csv"


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _dataset_path(path) -> Path:
    path = Path(path)
    return path / DATA_NAME if path.is_dir() else path


def _add_prior_flags(p):
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--p-gamma", type=float, default=0.5)
    p.add_argument("--p-eta", type=float, default=0.5)
    p.add_argument("--link", choices=LINKS, default=PROBIT)


def _add_smc_flags(p):
    p.add_argument("--N", type=int, default=25_000)
    p.add_argument("--M", type=int, default=125)
    p.add_argument("--P", type=int, default=200)
    p.add_argument("--ess-ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=_default_workers(),
                   help=f"marginal-likelihood worker processes (env {WORKERS_ENV})")
    p.add_argument("--max-stages", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevel-smc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--p", type=int, default=50)
    s.add_argument("--q", type=int, default=5)
    s.add_argument("--r", type=int, default=5)
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--link", choices=LINKS, default=PROBIT)
    s.add_argument("--active-pattern", choices=("last", "none"), default="last")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("run", help="run the SMC sampler")
    r.add_argument("--data", required=True, help="dataset CSV (or directory holding data.csv)")
    r.add_argument("--method", choices=(LA, ALA), default=ALA)
    _add_prior_flags(r)
    _add_smc_flags(r)
    r.add_argument("--out", required=True, help="result JSON path")

    o = sub.add_parser("oracle", help="exact enumeration, optionally compared with SMC")
    o.add_argument("--data", required=True)
    o.add_argument("--method", choices=(LA, ALA), default=ALA)
    o.add_argument("--smc", action="store_true", help="also run the sampler and compare")
    _add_prior_flags(o)
    _add_smc_flags(o)
    o.add_argument("--out", required=True, help="report JSON path")

    b = sub.add_parser("bench", help="timing study over a grid of n or p")
    b.add_argument("--grid", required=True,
                   help="'n=100,500,2500' or 'p=10,50,250'")
    b.add_argument("--fixed-n", type=int, default=1500)
    b.add_argument("--fixed-p", type=int, default=50)
    b.add_argument("--q", type=int, default=5)
    b.add_argument("--r", type=int, default=5)
    b.add_argument("--method", choices=(LA, ALA, "both"), default="both")
    b.add_argument("--reps", type=int, default=1)
    b.add_argument("--mode", choices=("run", "eval"), default="run",
                   help="full SMC runs, or timing of marginal likelihood evaluations only")
    b.add_argument("--evals", type=int, default=200, help="random models per rep in eval mode")
    _add_prior_flags(b)
    _add_smc_flags(b)
    b.add_argument("--out", required=True, help="CSV path")
    return parser


def _prior_from(args, data) -> PriorConfig:
    return PriorConfig.default(data.q, data.p, args.p_gamma, args.p_eta, args.sigma2, args.link)


def _smc_config(args, method) -> SmcConfig:
    return SmcConfig(N=args.N, M=args.M, P=args.P, ess_ratio=args.ess_ratio, seed=args.seed,
                     marglik_method=method, max_stages=args.max_stages, workers=args.workers)


def _validate_smc_flags(parser, args):
    if args.N != args.M * args.P:
        parser.error(f"--N must equal --M * --P (got {args.N} != {args.M} * {args.P})")
    if not 0 < args.ess_ratio < 1:
        parser.error("--ess-ratio must lie in (0, 1)")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    for name in ("p_gamma", "p_eta"):
        if not 0 < getattr(args, name) < 1:
            parser.error(f"--{name.replace('_', '-')} must lie in (0, 1)")
    if args.sigma2 <= 0:
        parser.error("--sigma2 must be positive")


def _parse_grid(parser, text):
    try:
        axis, values = text.split("=", 1)
        vals = [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        parser.error(f"malformed --grid {text!r}")
    if axis not in ("n", "p") or not vals or min(vals) < 1:
        parser.error(f"--grid must look like 'n=100,500' or 'p=10,50', got {text!r}")
    return axis, vals


def cmd_simulate(args, parser) -> int:
    if not 0 <= args.rho < 1:
        parser.error("--rho must lie in [0, 1)")
    try:
        spec = SimSpec(n=args.n, p=args.p, q=args.q, r=args.r, rho=args.rho, link=args.link,
                       active_pattern=args.active_pattern, seed=args.seed)
    except InputError as exc:
        parser.error(str(exc))
    data, truth, beta = simulate(spec)
    path = write_dataset(data, Path(args.out) / DATA_NAME)
    print(json.dumps({"gamma": truth.gamma.astype(int).tolist(),
                      "eta": truth.eta.astype(int).tolist(),
                      "path": str(path)}))
    return EXIT_OK


def cmd_run(args, parser) -> int:
    _validate_smc_flags(parser, args)
    data = read_dataset(_dataset_path(args.data))
    prior = _prior_from(args, data)
    config = _smc_config(args, args.method)
    try:
        result = run(data, prior, config)
    except SamplerError as exc:
        diag = {"schema_version": SCHEMA_VERSION, "error": str(exc), **exc.diagnostics}
        Path(args.out).write_text(json.dumps(diag, indent=2) + "\n")
        print(json.dumps(diag), file=sys.stderr)
        return EXIT_SAMPLER
    result.write_json(args.out)
    print(f"{args.method}: {result.n_stages} stages, {result.n_marglik_evals} marginal "
          f"likelihood evaluations, log evidence {result.log_evidence:.4f} -> {args.out}")
    return EXIT_OK


def cmd_oracle(args, parser) -> int:
    if args.smc:
        _validate_smc_flags(parser, args)
    data = read_dataset(_dataset_path(args.data))
    prior = _prior_from(args, data)
    evaluator = MarglikEvaluator(data, prior, args.method)
    try:
        enum = enumerate_posterior(data, prior, args.method, evaluator)
    except UnsupportedError as exc:
        print(f"oracle: {exc}", file=sys.stderr)
        return EXIT_ORACLE_CAP
    if args.smc:
        try:
            result = run(data, prior, _smc_config(args, args.method), evaluator=evaluator)
        except SamplerError as exc:
            print(json.dumps({"error": str(exc), **exc.diagnostics}), file=sys.stderr)
            return EXIT_SAMPLER
        report = compare(enum, result)
    else:
        report = {"schema_version": "1.0", "n_configs": int(enum.configs.shape[0]),
                  "oracle_gamma_incl": enum.gamma_incl.tolist(),
                  "oracle_eta_incl": enum.eta_incl.tolist(), "max_abs_gap": None}
    report["method"] = args.method
    write_report(report, args.out)
    gap = report["max_abs_gap"]
    print(f"oracle: {report['n_configs']} configurations"
          + (f", max inclusion gap {gap:.4f}" if gap is not None else "") + f" -> {args.out}")
    return EXIT_OK


BENCH_FIELDS = ["n", "p", "method", "rep", "seed", "stage_count", "wall_s",
                "marglik_evals", "mean_eval_s"]


def _bench_eval(data, prior, method, evals, seed):
    """Time ``evals`` marginal likelihood evaluations at random prior models."""
    t0 = time.perf_counter()
    ev = MarglikEvaluator(data, prior, method, memoize=False)
    build = time.perf_counter() - t0
    rows = sample_prior(prior.p_gamma, prior.p_eta, data.group_index,
                        np.random.default_rng(seed), evals)
    t0 = time.perf_counter()
    ev.evaluate_batch(rows)
    elapsed = time.perf_counter() - t0
    return build + elapsed, evals, elapsed / evals


def cmd_bench(args, parser) -> int:
    _validate_smc_flags(parser, args)
    axis, values = _parse_grid(parser, args.grid)
    if args.reps < 1:
        parser.error("--reps must be >= 1")
    methods = (LA, ALA) if args.method == "both" else (args.method,)
    out_rows = []
    for v in values:
        n = v if axis == "n" else args.fixed_n
        p = v if axis == "p" else args.fixed_p
        for rep in range(args.reps):
            seed = args.seed + rep
            data, _, _ = simulate(SimSpec(n=n, p=p, q=args.q, r=args.r, link=args.link, seed=seed))
            prior = _prior_from(args, data)
            for method in methods:
                if args.mode == "eval":
                    wall, evals, per = _bench_eval(data, prior, method, args.evals, seed)
                    stages = 0
                else:
                    config = SmcConfig(N=args.N, M=args.M, P=args.P, ess_ratio=args.ess_ratio,
                                       seed=seed, marglik_method=method,
                                       max_stages=args.max_stages, workers=args.workers)
                    t0 = time.perf_counter()
                    try:
                        res = run(data, prior, config)
                    except SamplerError as exc:
                        print(json.dumps({"error": str(exc), **exc.diagnostics}), file=sys.stderr)
                        return EXIT_SAMPLER
                    wall = time.perf_counter() - t0
                    evals, stages = res.n_marglik_evals, res.n_stages
                    per = res.marglik_time_s / max(evals, 1)
                out_rows.append({"n": n, "p": p, "method": method, "rep": rep, "seed": seed,
                                 "stage_count": stages, "wall_s": f"{wall:.6f}",
                                 "marglik_evals": evals, "mean_eval_s": f"{per:.9f}"})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        writer.writerows(out_rows)
    print(f"bench: {len(out_rows)} rows -> {args.out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "oracle": cmd_oracle, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, parser)
    except BilevelError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
