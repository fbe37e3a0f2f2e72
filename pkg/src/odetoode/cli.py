"""Command-line entry point.

Subcommands: ``stability``, ``train-es``, ``train-supervised``,
``verify-bounds``. Exit codes: 0 success, 1 a verification failed, 2 bad
configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .envs import make_objective
from .es import train_es
from .exceptions import ConfigError, DatasetError
from .config import parse_config
from .flows import ThetaParams
from .stability import baseline_contrast, verify_appendix_bounds, verify_lemma1
from .supervised import load_csv, synth_dataset, train_supervised

SCHEMA_VERSION = 1

# flag name -> config path, per subcommand
OVERRIDES = {
    "stability": {"depths": "grid.depths", "dims": "grid.dims", "seed_count": "grid.seed_count"},
    "train-es": {"iterations": "es.iterations", "runs": "es.runs", "sigma": "es.sigma",
                 "perturbations": "es.perturbations", "schedule": "es.schedule",
                 "step_size": "es.step_size", "hidden": "es.hidden"},
    "train-supervised": {"dataset": "supervised.dataset", "epochs": "supervised.epochs",
                         "generator": "supervised.generator", "hidden": "supervised.hidden",
                         "learning_rate": "supervised.learning_rate",
                         "depth_steps": "supervised.depth_steps", "step": "supervised.step"},
    "verify-bounds": {"samples": "bounds.samples", "es_estimates": "bounds.es_estimates"},
}


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns, rows, timestamp=True):
    """Write rows with a fixed column order; returns the file's sha256."""
    with open(path, "w", newline="") as fh:
        if timestamp:
            fh.write(f"# generated_at={_now()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return _sha256(path)


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_summary(out, command, cfg, artifacts, results, timestamp):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.resolved(),
        "artifacts": artifacts,
        "results": results,
    }
    if timestamp:
        manifest["generated_at"] = _now()
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_stability(cfg, out, threads, ts):
    report = verify_lemma1(cfg.grid_spec(), threads=threads)
    contrast = baseline_contrast(cfg.contrast_spec(), threads=threads)
    artifacts = {
        "report.csv": write_csv(os.path.join(out, "report.csv"), report.COLUMNS, report.csv_rows(), ts),
        "contrast.csv": write_csv(os.path.join(out, "contrast.csv"), contrast.COLUMNS,
                                  contrast.csv_rows(), ts),
    }
    summary = report.summary()
    summary["contrast_passed"] = contrast.passed
    summary["baseline_max_ratio"] = max((r.baseline_max for r in contrast.rows
                                         if not math.isnan(r.baseline_max)), default=math.nan)
    ok = report.passed and contrast.passed
    print(f"lemma1: {summary['cells'] - summary['failed']}/{summary['cells']} cells within bounds; "
          f"ratios in [{summary['min_ratio']:.6f}, {summary['max_ratio']:.6f}]")
    print(f"contrast: ODEtoODE {'within' if contrast.passed else 'OUTSIDE'} bounds; "
          f"baseline max ratio {summary['baseline_max_ratio']:.4g}")
    return ok, artifacts, summary


def cmd_train_es(cfg, out, threads, ts):
    env = cfg.env()
    flow = cfg.flow_config()
    hidden = cfg["es.hidden"]
    rows = []
    results = {"runs": []}
    for k in range(cfg["es.runs"]):
        seed = cfg.seed + k
        theta0 = ThetaParams.random(env.state_dim, hidden, env.action_dim, seed=seed)
        objective = make_objective(env, theta0.dims, flow, threads=threads)
        hist = train_es(objective, theta0, cfg.es_config(seed=seed), cfg["es.iterations"])
        rows.extend((seed,) + r for r in hist.rows())
        run = {"seed": seed, "initial_objective": hist.objective[0],
               "final_objective": hist.final_objective,
               "final_running_min": hist.running_min[-1],
               "trend_slope": hist.trend_slope(), "reference_slope": -0.5,
               "bound_violations": int(sum(hist.bound_violation))}
        results["runs"].append(run)
        print(f"seed {seed}: F {run['initial_objective']:.4f} -> {run['final_objective']:.4f}; "
              f"min ||grad_R||^2 trend slope {run['trend_slope']:.3f} (reference -0.5)")
    results["mean_initial_objective"] = float(np.mean([r["initial_objective"] for r in results["runs"]]))
    results["mean_final_objective"] = float(np.mean([r["final_objective"] for r in results["runs"]]))
    columns = ("run_seed",) + hist.CSV_COLUMNS
    artifacts = {"history.csv": write_csv(os.path.join(out, "history.csv"), columns, rows, ts)}
    return True, artifacts, results


def cmd_train_supervised(cfg, out, threads, ts):
    sup = cfg.supervised_config()
    name = cfg["supervised.dataset"]
    if name in ("blobs", "rings"):
        ds = synth_dataset(name, cfg["supervised.count"], seed=cfg.seed)
    else:
        ds = load_csv(name)
    hist = train_supervised(ds, sup)
    artifacts = {"history.csv": write_csv(os.path.join(out, "history.csv"), hist.CSV_COLUMNS,
                                          hist.rows(), ts)}
    results = {"final_loss": hist.loss[-1], "final_accuracy": hist.accuracy[-1],
               "ratio_bounds": list(hist.bounds),
               "ratios_within_bounds": hist.ratios_within_bounds()}
    print(f"epoch {hist.epoch[-1]}: loss {hist.loss[-1]:.5f}, accuracy {hist.accuracy[-1]:.4f}")
    return True, artifacts, results


def cmd_verify_bounds(cfg, out, threads, ts):
    report = verify_appendix_bounds(cfg.env(), cfg.appendix_spec())
    artifacts = {"report.csv": write_csv(os.path.join(out, "report.csv"), report.COLUMNS,
                                         report.csv_rows(), ts)}
    for a in report.audits:
        print(f"{a.name}: {'pass' if a.passed else 'FAIL'} (worst margin {a.worst_margin:.4g}, "
              f"{a.samples} samples)")
    return report.passed, artifacts, {"passed": report.passed,
                                      "audits": [a.__dict__ for a in report.audits]}


HELP = {
    "stability": "gradient-ratio grid and trig-baseline contrast",
    "train-es": "ES training of the orthogonal-flow policy",
    "train-supervised": "classifier training on synthetic or CSV data",
    "verify-bounds": "empirical audits of the Lipschitz and moment bounds",
}

COMMANDS = {
    "stability": cmd_stability,
    "train-es": cmd_train_es,
    "train-supervised": cmd_train_supervised,
    "verify-bounds": cmd_verify_bounds,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="odetoode", description="Nested orthogonal-flow ODE experiments.",
        epilog="exit codes: 0 success, 1 verification failed, 2 bad configuration or input")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in OVERRIDES.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (default: available cores)")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit generated_at lines so outputs are byte-stable")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key (repeatable)")
        for flag in flags:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    overrides = list(args.set)
    for flag, path in OVERRIDES[args.command].items():
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{path}={value}")
    for flag, path in (("seed", "run.seed"), ("out", "run.out"), ("threads", "run.threads")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{path}={value}")
    if args.no_timestamp:
        overrides.append("run.timestamp=false")
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = cfg["run.out"]
    threads = cfg["run.threads"] or os.cpu_count() or 1
    os.makedirs(out, exist_ok=True)
    try:
        ok, artifacts, results = COMMANDS[args.command](cfg, out, threads, cfg["run.timestamp"])
    except (DatasetError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    write_summary(out, args.command, cfg, artifacts, results, cfg["run.timestamp"])
    if not ok:
        print("verification failed", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
