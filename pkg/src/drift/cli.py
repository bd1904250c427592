"""Command-line entry points: ``simulate``, ``fit``, ``predict`` and ``benchmark``."""
from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .io import DataFormatError, RunConfig, load_artifact, load_dataset_csv, save_model
from .maximin import DriftStepError, factorized_geo_predict, itr_assign, run_drift
from .simulation import run_study

log = logging.getLogger("drift")


def _parser():
    p = argparse.ArgumentParser(prog="drift", description="Robust individualized treatment effects from multi-item outcomes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a simulation study and write long-format metrics")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="fit a model on a study and save it as JSON")
    f.add_argument("--data", required=True)
    f.add_argument("--schema", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True, help="model file")
    f.add_argument("--geo", choices=("observed", "unobserved"))
    f.add_argument("--method", choices=("randomized", "dr"))

    r = sub.add_parser("predict", help="per-subject robust ITEs and treatment assignments")
    r.add_argument("--model", required=True)
    r.add_argument("--covariates", required=True)
    r.add_argument("--out", required=True)

    b = sub.add_parser("benchmark", help="all five methods with worst-case metric tables")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True, help="output directory")
    return p


def _load_config(path, seed=None):
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = RunConfig.load(path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _study(cfg: RunConfig, out_dir, reps=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim_config()
    report = run_study(sim, sweep=cfg.sweep, workers=cfg.threads or None, reps=reps)
    report.to_csv(out / "metrics.csv")
    (out / "config.json").write_text(cfg.dumps())
    return report, out


def cmd_simulate(args):
    cfg = _load_config(args.config, args.seed)
    report, out = _study(cfg, args.out, args.reps)
    log.info("wrote %d records to %s", len(report.records), out / "metrics.csv")
    return 0


def cmd_benchmark(args):
    cfg = _load_config(args.config)
    report, out = _study(cfg, args.out)
    rows = report.summary()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep_param", "sweep_value", "method", "metric", "mean", "median", "n"])
        for row in rows:
            w.writerow([report.sweep_param, repr(row["sweep_value"]), row["method"], row["metric"],
                        repr(row["mean"]), repr(row["median"]), row["n"]])
    for row in rows:
        print(f"{report.sweep_param}={row['sweep_value']:g}  {row['method']:<15} {row['metric']:<8} "
              f"mean={row['mean']:.4f} median={row['median']:.4f}")
    return 0


def cmd_fit(args):
    cfg = _load_config(args.config)
    if "K" not in cfg.factor:
        raise ValueError("config section 'factor' must set K")
    data = load_dataset_csv(args.data, args.schema)
    opts = cfg.drift_options()
    geo = args.geo or opts.geo
    method = args.method or opts.method
    model = run_drift(data, cfg.factor_config(), geo=geo, delta=opts.delta, method=method,
                      split_seed=opts.split_seed)
    save_model(model, args.out, schema=data.schema, seed=cfg.seed)
    log.info("saved model (delta=%g) to %s", model.delta, args.out)
    return 0


def _load_covariates(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if not rows:
        raise DataFormatError(f"{path}: file is empty")
    header = [c.strip() for c in rows[0]]
    x_cols = [j for j, c in enumerate(header) if re.fullmatch(r"x\d+", c)]
    if not x_cols:
        raise DataFormatError(f"{path}: no covariate columns x1..xp")
    id_col = header.index("id") if "id" in header else None
    ids, X = [], np.empty((len(rows) - 1, len(x_cols)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for k, j in enumerate(x_cols):
            try:
                X[i - 2, k] = float(row[j])
            except ValueError:
                raise DataFormatError(f"{path}: row {i}, column '{header[j]}': non-numeric value {row[j]!r}") from None
        ids.append(row[id_col] if id_col is not None else str(i - 1))
    return ids, X


def cmd_predict(args):
    model = load_artifact(args.model).to_model()
    ids, X = _load_covariates(args.covariates)
    tau = np.atleast_1d(model.predict(X))
    geo = np.atleast_1d(factorized_geo_predict(model, X))
    assign = np.atleast_1d(itr_assign(model, X))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "tau", "itr", "tau_factorized_geo"])
        for i, t, a, g in zip(ids, tau, assign, geo):
            w.writerow([i, repr(float(t)), int(a), repr(float(g))])
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "benchmark": cmd_benchmark}


def cmd_dispatch(argv=None) -> int:
    """Run one subcommand; returns the process exit code (2 for usage
    errors, 1 for failures)."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        parser.print_usage(sys.stderr)
        print(f"drift {args.command}: {err}", file=sys.stderr)
        return 2
    except (DataFormatError, ValueError, DriftStepError, np.linalg.LinAlgError, RuntimeError) as err:
        print(f"drift {args.command}: error: {err}", file=sys.stderr)
        return 1


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(cmd_dispatch())


if __name__ == "__main__":
    main()
