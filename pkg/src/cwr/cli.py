"""Command-line interface: ``cwr estimate | balance | simulate | mc | replay``.

Exit codes: 0 success, 2 invalid input, 3 solver or bootstrap failure,
4 degenerate data. Every file written is accompanied by a
``<name>.manifest.json`` recording how to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import filter_single_arm_clusters, parse_csv, write_csv
from .errors import ConvergenceError, DegenerateDataError, ValidationError
from .estimator import AGGREGATIONS
from .inference import balance_diagnostics, bootstrap
from .montecarlo import run_monte_carlo
from .pipeline import ESTIMATORS, Pipeline, pipeline_from_name
from .propensity import LINKS
from .simulation import ScenarioConfig, resolved_gamma1_shape, simulate_unfiltered

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_DEGENERATE = 0, 2, 3, 4


def _clean(obj):
    """Make ``obj`` JSON-safe: NaN/inf become null, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _write_manifest(path: Path, args, config: dict, started: float):
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "duration_seconds": round(time.perf_counter() - started, 3),
    }
    path.write_text(_dump(manifest), encoding="utf-8")


def _manifest_path(out: str) -> Path:
    return Path(str(out) + ".manifest.json")


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("CWR_THREADS")
        try:
            n = int(env) if env else (os.cpu_count() or 1)
        except ValueError:
            raise ValidationError(f"CWR_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ValidationError("thread count must be at least 1")
    return n


def _load_dataset(path):
    ds = parse_csv(path)
    ds, report = filter_single_arm_clusters(ds)
    return ds, report


def _pipeline(args) -> Pipeline:
    return Pipeline(args.estimator, args.link, aggregation=args.aggregation)


# -- commands -------------------------------------------------------------------------------
def cmd_estimate(args) -> int:
    started = time.perf_counter()
    ds, report = _load_dataset(args.input)
    pipe = _pipeline(args)
    est, weights = pipe.run(ds)
    result = {
        "estimator": pipe.estimator,
        "link": pipe.link,
        "aggregation": pipe.aggregation if pipe.clustered else None,
        "n_subjects": ds.n,
        "n_clusters": ds.m,
        "dropped_single_arm_clusters": [str(c) for c in report.excluded_ids],
        "log_wr": est.log_wr,
        "wr": est.wr,
        "tau1": est.tau1,
        "tau2": est.tau2,
        "total_weight": est.total_weight,
        "excluded_clusters": [str(c) for c in est.excluded_clusters],
        "per_cluster": [
            {"cluster": str(c.cluster_id), "tau1": c.tau1, "tau2": c.tau2, "cluster_weight": c.cluster_weight}
            for c in est.per_cluster
        ],
        "inference": None,
        "balance": [
            {"covariate": r.covariate, "weighted_abs_diff": r.weighted_abs_diff, "unweighted_abs_diff": r.unweighted_abs_diff}
            for r in balance_diagnostics(ds, weights)
        ],
    }
    if args.bootstrap > 0:
        inf = bootstrap(ds, pipe, args.bootstrap, args.seed, point=est.log_wr, n_jobs=_threads(args))
        result["inference"] = {
            "se_log_wr": inf.se_log_wr,
            "ci_low": inf.ci_low,
            "ci_high": inf.ci_high,
            "z_stat": inf.z_stat,
            "p_value": inf.p_value,
            "bootstrap_reps": args.bootstrap,
            "bootstrap_reps_used": inf.bootstrap_reps_used,
            "failed_reps": inf.failed_reps,
        }
    _emit(_dump(result), args.out)
    if args.out:
        config = {"input": str(args.input), "estimator": pipe.estimator, "link": pipe.link,
                  "aggregation": pipe.aggregation, "bootstrap": args.bootstrap}
        _write_manifest(_manifest_path(args.out), args, config, started)
    return EXIT_OK


def cmd_balance(args) -> int:
    started = time.perf_counter()
    ds, _ = _load_dataset(args.input)
    weights = _pipeline(args).weights(ds)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["covariate", "weighted_abs_diff", "unweighted_abs_diff"])
    for r in balance_diagnostics(ds, weights):
        writer.writerow([r.covariate, repr(r.weighted_abs_diff), repr(r.unweighted_abs_diff)])
    _emit(buf.getvalue(), args.out)
    if args.out:
        config = {"input": str(args.input), "estimator": args.estimator, "link": args.link}
        _write_manifest(_manifest_path(args.out), args, config, started)
    return EXIT_OK


def _load_scenario(path) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read scenario file: {exc}") from None
    return ScenarioConfig.from_json(text)


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    cfg = _load_scenario(args.scenario)
    cfg = cfg.replace(gamma1_shape=resolved_gamma1_shape(cfg))
    # written unfiltered so the file holds exactly m * n_i subjects;
    # analysis commands drop single-arm clusters on reading
    ds = simulate_unfiltered(cfg, np.random.default_rng(args.seed))
    write_csv(ds, args.out)
    treated, control = ds.arm_counts()
    config = cfg.to_dict()
    config["single_arm_clusters"] = [int(ds.labels[k]) for k in np.flatnonzero((treated == 0) | (control == 0))]
    _write_manifest(_manifest_path(args.out), args, config, started)
    return EXIT_OK


def cmd_mc(args) -> int:
    started = time.perf_counter()
    cfg = _load_scenario(args.scenario)
    if args.paper_scale:
        cfg = cfg.replace(reps=3000)
    reps = args.reps if args.reps is not None else cfg.reps
    B = args.bootstrap if args.bootstrap is not None else cfg.B
    seed = args.seed if args.seed is not None else cfg.seed
    names = [n.strip() for n in args.estimators.split(",") if n.strip()]
    for n in names:
        pipeline_from_name(n)
    result = run_monte_carlo(cfg, names, reps=reps, B=B, seed=seed, n_jobs=_threads(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.to_csv(), encoding="utf-8")
    (out / "summary.md").write_text(result.to_markdown(), encoding="utf-8")
    (out / "traces.csv").write_text(result.traces_csv(), encoding="utf-8")
    config = result.config.to_dict()
    config["estimators"] = names
    _write_manifest(out / "manifest.json", args, config, started)
    if result.any_flagged:
        flagged = [r.estimator for r in result.rows if r.flagged]
        print(f"error: failure rate above threshold for {', '.join(flagged)}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        argv = manifest["argv"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"cannot read manifest: {exc}") from None
    if manifest.get("version") != __version__:
        print(f"warning: manifest written by version {manifest.get('version')}", file=sys.stderr)
    return main(argv)


# -- parser ---------------------------------------------------------------------------------
def _add_estimation_args(p, need_bootstrap: bool):
    p.add_argument("--input", required=True, help="dataset CSV")
    p.add_argument("--estimator", choices=ESTIMATORS, default="calibration")
    p.add_argument("--link", choices=LINKS, default="logit", help="link of the propensity model")
    p.add_argument("--aggregation", choices=AGGREGATIONS, default="pooled",
                   help="how cluster-specific results are combined")
    if need_bootstrap:
        p.add_argument("--bootstrap", type=int, default=200, metavar="B", help="bootstrap replicates (0 = none)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (default: standard output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwr", description="Calibration-weighted stratified win ratio for clustered data.")
    parser.add_argument("--version", action="version", version=f"cwr {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: $CWR_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", parents=[common], help="point estimate, bootstrap inference and balance table as JSON")
    _add_estimation_args(p, need_bootstrap=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("balance", parents=[common], help="absolute differences in covariate means between arms as CSV")
    _add_estimation_args(p, need_bootstrap=False)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("simulate", parents=[common], help="draw one synthetic dataset")
    p.add_argument("--scenario", help="scenario JSON (default: built-in scenario)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mc", parents=[common], help="Monte Carlo study")
    p.add_argument("--scenario", help="scenario JSON (default: built-in scenario)")
    p.add_argument("--estimators", default="unadjusted,logistic,fixed,random,calibration",
                   help="comma-separated names, e.g. calibration,calibration-cloglog")
    p.add_argument("--reps", type=int)
    p.add_argument("--bootstrap", type=int, metavar="B")
    p.add_argument("--seed", type=int)
    p.add_argument("--paper-scale", action="store_true", help="use 3000 replicates")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("replay", parents=[common], help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DegenerateDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
