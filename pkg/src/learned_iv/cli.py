"""Command-line entry point: ``learned-iv {simulate,fit,experiment,bma,validate}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .harness import ConfigError, load_config
from .kernels import median_heuristic
from .kiv import fit_quasi_posterior, half_split, resolve_hyperparameters
from .simgen import generate, read_stage_csv
from .validation import write_reports

log = logging.getLogger("learned_iv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


def _out_dir(args, config, default):
    return Path(args.out or config.output_dir or default)


def cmd_simulate(args):
    config = load_config(args.config)
    ds = generate(config.scenario.replace(seed=config.master_seed))
    out = _out_dir(args, config, "data")
    ds.export_csv(out)
    print(f"wrote {config.scenario.design} dataset (seed {config.master_seed}) to {out}")


def _load_stages(data_path, stage1_path, seed):
    z, x, y = read_stage_csv(data_path)
    sibling = Path(data_path).with_name("stage1.csv")
    if stage1_path:
        s1 = read_stage_csv(stage1_path)
    elif sibling.exists() and sibling.resolve() != Path(data_path).resolve():
        s1 = read_stage_csv(sibling)
    else:
        log.warning("no stage-1 file; splitting %s in half", data_path)
        a, b = half_split(len(y), seed)
        return (z[a], x[a], y[a]), (z[b], x[b], y[b])
    return s1, (z, x, y)


def cmd_fit(args):
    """Fit one quasi-posterior on CSV data and write pointwise summaries."""
    config = load_config(args.config)
    seed = config.master_seed
    stage1, stage2 = _load_stages(args.data, args.stage1, seed)
    ds = _CsvData(stage1, stage2)
    kx = harness.second_stage_kernel(config, ds)  # no known truth here, so "truth" means the median kernel
    fm = harness.build_first_stage(config.first_stage, config.oracle, config.m, ds, kx, seed, config.num_rff)
    lam, nu = resolve_hyperparameters(fm, stage2[0], stage2[2], config.kiv, seed)
    post = fit_quasi_posterior(stage2, fm, config.kiv, seed, spec=kx, lam=lam, nu=nu)
    x = stage2[1]
    grid = np.linspace(np.quantile(x, 0.025), np.quantile(x, 0.975), args.grid)
    summary = post.credible_summaries(grid, level=config.levels[0], n_samples=config.n_samples, seed=seed)
    if not np.all(np.isfinite(summary.mean)):
        raise NumericalFailure("posterior mean is not finite")
    out = Path(args.out or "fit_summary.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    summary.export_csv(out, grid)
    print(json.dumps({"lam": lam, "nu": nu, "log_ml": post.log_marginal_quasi_likelihood(),
                      "kernel": kx.to_dict(), "ball_radius": summary.ball_radius, "summary": str(out)}))


class _CsvData:
    def __init__(self, stage1, stage2):
        self.stage1, self.stage2 = stage1, stage2
        self.truth_kernel = None


def cmd_experiment(args):
    config = load_config(args.config)
    if args.replicates is not None:
        config = config.replace(replicates=args.replicates)
    out = _out_dir(args, config, "results")

    def progress(rec):
        status = "error" if rec.error else f"mse={rec.test_mse:.4g}"
        log.info("replicate %d %s (%.1fs)", rec.replicate, status, rec.runtime_s)

    records = harness.run_experiment(config, threads=args.threads, output_dir=out, progress=progress)
    summary = harness.summarize(records)
    print(json.dumps(summary, indent=2))
    if summary["failed"] == len(records):
        raise NumericalFailure(f"all {len(records)} replicates failed; see {out / 'errors.log'}")


def cmd_bma(args):
    config = load_config(args.config)
    grid = config.bma_grid or harness.BMAGrid()
    seed = config.master_seed
    ds = generate(config.scenario.replace(seed=seed))
    if config.scenario.design == "demand":
        raise ConfigError("bma needs a design with a scalar treatment (identity or nn)")
    kx = harness.second_stage_kernel(config, ds)
    fm = harness.build_first_stage(config.first_stage, config.oracle, config.m, ds, kx, seed, config.num_rff)
    bma = harness.fit_bma(ds.stage2, fm, grid, median_heuristic(ds.stage2[1]), config.kiv, seed)
    out = _out_dir(args, config, "bma")
    out.mkdir(parents=True, exist_ok=True)
    bma.export_weights(out / "bma_weights.json")
    s = bma.credible_summaries(ds.test_x, level=config.levels[0], n_samples=config.n_samples, seed=seed)
    order = np.argsort(ds.test_x)
    s_sorted = type(s)(s.mean[order], s.sd[order], s.ci_lower[order], s.ci_upper[order], s.ball_radius, s.level)
    s_sorted.export_csv(out / "bma_summary.csv", ds.test_x[order])
    metrics = harness.evaluate_metrics(bma, ds, config.levels, config.n_samples, seed)
    print(json.dumps({"weights": bma.weight_records(), "metrics": {f"{k:g}": v for k, v in metrics.items()}},
                     indent=2))


def cmd_validate(args):
    config = load_config(args.config)
    if config.scenario.design == "demand":
        raise ConfigError("validate needs a design with a scalar treatment (identity or nn)")
    rows = harness.first_stage_sweep(config, m_v=args.m_v)
    out = _out_dir(args, config, "validation")
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out / "validation.csv", rows)
    rho = harness.sweep_spearman(rows)
    for r in rows:
        print(f"{r['label']:<28} validation={r['validation']:.4g} test_mse={r['test_mse']:.4g} {r['error']}")
    print(f"spearman(validation, test_mse) = {rho:.3f}")
    if all(r["error"] for r in rows):
        raise NumericalFailure("every first-stage variant failed")


def build_parser():
    p = argparse.ArgumentParser(prog="learned-iv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate one dataset and write CSVs")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a quasi-posterior on a stage-2 CSV")
    s.add_argument("--data", required=True, help="stage-2 CSV with columns z_1..z_D,x,y")
    s.add_argument("--stage1", help="stage-1 CSV (default: stage1.csv beside --data, else a half split)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="summary CSV path (default fit_summary.csv)")
    s.add_argument("--grid", type=int, default=200, help="number of evaluation points")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("experiment", help="run seeded replicates and write metrics")
    s.add_argument("--config", required=True)
    s.add_argument("--replicates", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("bma", help="model averaging over the kernel grid on one dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bma)

    s = sub.add_parser("validate", help="first-stage validation sweep on one dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--m-v", type=int, default=10)
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, IsADirectoryError) as err:  # ConfigError is a ValueError
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
