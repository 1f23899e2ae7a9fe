"""Config-driven simulation runner: replicates, metrics, aggregation and plots."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ._rng import child_seed
from .exo import counterfactual_mse, fit_exo
from .kernels import DEFAULT_NUM_RFF, KernelSpec, _as_2d, median_heuristic
from .kiv import KIVConfig, bma_combine, bma_log_prior, fit_quasi_posterior, resolve_hyperparameters
from .learned_kernel import build_learned_feature_map, clamp_threshold, fixed_kernel_feature_map
from .oracle import KRRConfig, MLPConfig, RegressionTask, RFRidgeConfig, fit_oracle, oracle_from_dict
from .simgen import ScenarioConfig, generate
from .validation import first_stage_validation

CSV_FIELDS = ("replicate", "test_mse", "cb_radius", "cb_covered", "ci_coverage_avg", "log_ml", "runtime_s", "seed")
FIRST_STAGES = ("learned", "rbf")
SECOND_STAGES = ("truth", "median", "config")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class BMAGrid:
    """Output scales ``sigma`` (kernel variance ``sigma**2``) and bandwidth multipliers of the median distance."""

    sigmas: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    bandwidth_multipliers: tuple = (0.5, 1.0, 1.5)

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "bandwidth_multipliers", tuple(float(h) for h in self.bandwidth_multipliers))
        if not self.sigmas or not self.bandwidth_multipliers:
            raise ConfigError("bma_grid needs at least one sigma and one bandwidth multiplier")
        if min(self.sigmas) <= 0 or min(self.bandwidth_multipliers) <= 0:
            raise ConfigError("bma_grid values must be positive")

    def to_dict(self):
        return {"sigmas": list(self.sigmas), "bandwidth_multipliers": list(self.bandwidth_multipliers)}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun a simulation table.

    ``first_stage`` picks the learned kernel or a fixed RBF instrument
    kernel (median-trick bandwidth on standardised instruments).
    ``second_stage`` picks the treatment kernel: ``"truth"`` uses the GP
    prior the truth was drawn from when there is one and falls back to
    ``"median"`` otherwise; ``"config"`` uses ``kiv.second_stage``.
    The first level in ``levels`` feeds the main metrics file.
    """

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    oracle: object = field(default_factory=KRRConfig)
    kiv: KIVConfig = field(default_factory=KIVConfig)
    m: int = 100
    replicates: int = 1
    levels: tuple = (0.9,)
    bma_grid: BMAGrid | None = None
    output_dir: str | None = None
    master_seed: int = 0
    first_stage: str = "learned"
    second_stage: str = "truth"
    n_samples: int = 2000
    num_rff: int = DEFAULT_NUM_RFF

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in np.atleast_1d(self.levels)))
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not self.levels or any(not 0 < v < 1 for v in self.levels):
            raise ConfigError("levels must be a nonempty list in (0, 1)")
        if self.first_stage not in FIRST_STAGES:
            raise ConfigError(f"first_stage must be one of {FIRST_STAGES}")
        if self.second_stage not in SECOND_STAGES:
            raise ConfigError(f"second_stage must be one of {SECOND_STAGES}")
        if self.n_samples < 10 or self.num_rff < 1:
            raise ConfigError("n_samples must be >= 10 and num_rff >= 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "scenario": self.scenario.to_dict(),
            "oracle": self.oracle.to_dict(),
            "kiv": self.kiv.to_dict(),
            "m": self.m,
            "replicates": self.replicates,
            "levels": list(self.levels),
            "bma_grid": None if self.bma_grid is None else self.bma_grid.to_dict(),
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "first_stage": self.first_stage,
            "second_stage": self.second_stage,
            "n_samples": self.n_samples,
            "num_rff": self.num_rff,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            if "scenario" in d:
                d["scenario"] = ScenarioConfig.from_dict(d["scenario"])
            if "oracle" in d:
                d["oracle"] = oracle_from_dict(d["oracle"])
            if "kiv" in d:
                d["kiv"] = KIVConfig.from_dict(d["kiv"])
            if d.get("bma_grid") is not None:
                d["bma_grid"] = BMAGrid(**d["bma_grid"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as err:
            raise ConfigError(str(err)) from err


def load_config(path, seed_env="LEARNED_IV_SEED"):
    """Read a JSON config; the ``LEARNED_IV_SEED`` variable overrides ``master_seed``."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    env = os.environ.get(seed_env)
    if env is not None:
        try:
            raw["master_seed"] = int(env)
        except ValueError as err:
            raise ConfigError(f"{seed_env} must be an integer, got {env!r}") from err
    return ExperimentConfig.from_dict(raw)


def replicate_seed(master_seed, replicate):
    return child_seed(master_seed, replicate)


# -- one replicate -----------------------------------------------------------

def _with_seed(oracle, seed):
    return dataclasses.replace(oracle, seed=seed) if dataclasses.is_dataclass(oracle) and hasattr(oracle, "seed") \
        else oracle


def second_stage_kernel(config, dataset):
    if config.second_stage == "config":
        return config.kiv.second_stage
    if config.second_stage == "truth" and getattr(dataset, "truth_kernel", None) is not None:
        return dataset.truth_kernel
    return KernelSpec("rbf", median_heuristic(dataset.stage2[1]), 1.0)


def build_first_stage(kind, oracle, m, dataset, kx, seed, num_rff=DEFAULT_NUM_RFF, kz_multiplier=1.0):
    """Learned feature map or an RBF instrument kernel, both with the reduced-form column."""
    oracle = _with_seed(oracle, child_seed(seed, 3))
    if kind == "learned":
        return build_learned_feature_map(dataset.stage1, kx, m, oracle, seed=seed, num_rff=num_rff)
    if kind != "rbf":
        raise ConfigError(f"unknown first stage {kind!r}")
    z1, _, y1 = dataset.stage1
    z1 = _as_2d(z1)
    std = z1.std(axis=0)
    zs = (z1 - z1.mean(axis=0)) / np.where(std > 0, std, 1.0)
    kz = KernelSpec("rbf", kz_multiplier * median_heuristic(zs), 1.0)
    holdout = 0.2 if isinstance(oracle, MLPConfig) else 0.0
    rf = fit_oracle(oracle, RegressionTask(z1, np.asarray(y1, dtype=float)[:, None], holdout))
    return fixed_kernel_feature_map(kz, z1, seed=child_seed(seed, 4), reduced_form=rf,
                                    threshold=clamp_threshold(m))


def fit_bma(stage2, feature_map, grid, base_bandwidth, kiv=None, seed=0, lam=None, nu=None):
    """Average quasi-posteriors over an (output scale, bandwidth) grid.

    ``lam`` and ``nu`` are shared by every candidate. Candidates whose fit
    fails are dropped; if all fail the error propagates.
    """
    kiv = kiv or KIVConfig()
    if lam is None or nu is None:
        lam, nu = resolve_hyperparameters(feature_map, stage2[0], stage2[2], kiv, seed)
    cands, labels, last_err = [], [], None
    for sigma in grid.sigmas:
        for h in grid.bandwidth_multipliers:
            spec = KernelSpec("rbf", h * base_bandwidth, sigma**2)
            try:
                post = fit_quasi_posterior(stage2, feature_map, kiv, seed, spec=spec, lam=lam, nu=nu)
            except (np.linalg.LinAlgError, ValueError) as err:
                last_err = err
                continue
            cands.append((post, bma_log_prior(sigma, h)))
            labels.append({"sigma": sigma, "h": h})
    if not cands:
        raise RuntimeError(f"all BMA candidates failed: {last_err}")
    return bma_combine(cands, labels)


def fit_replicate(config, dataset, seed):
    """Fit the configured estimator on one dataset; returns ``(estimator, feature_map)``."""
    kx = second_stage_kernel(config, dataset)
    fm = build_first_stage(config.first_stage, config.oracle, config.m, dataset, kx, seed, config.num_rff)
    Z, X, Y = dataset.stage2
    lam, nu = resolve_hyperparameters(fm, Z, Y, config.kiv, seed)
    if config.bma_grid is None:
        est = fit_quasi_posterior(dataset.stage2, fm, config.kiv, seed, spec=kx, lam=lam, nu=nu)
    else:
        est = fit_bma(dataset.stage2, fm, config.bma_grid, median_heuristic(X), config.kiv, seed, lam, nu)
    return est, fm


def evaluate_metrics(estimator, dataset, levels=(0.9,), n_samples=2000, seed=0):
    """Test MSE, credible-ball and pointwise-interval coverage against the standardised truth.

    Returns a dict keyed by level; each value holds ``test_mse``,
    ``cb_radius``, ``cb_covered``, ``ci_coverage_avg`` and ``log_ml``.
    The ball norm is the RMS over the test points.
    """
    Xs, truth = dataset.test_x, np.asarray(dataset.test_truth, dtype=float)
    log_ml = float(estimator.log_marginal_quasi_likelihood())
    out = {}
    for level in np.atleast_1d(levels):
        s = estimator.credible_summaries(Xs, level=float(level), n_samples=n_samples, seed=seed)
        err = np.asarray(s.mean) - truth
        inside = (truth >= s.ci_lower) & (truth <= s.ci_upper)
        out[float(level)] = {
            "test_mse": float(np.mean(err**2)),
            "cb_radius": float(s.ball_radius),
            "cb_covered": int(math.sqrt(np.mean(err**2)) <= s.ball_radius),
            "ci_coverage_avg": float(np.mean(inside)),
            "log_ml": log_ml,
        }
    return out


@dataclass(frozen=True)
class MetricsRecord:
    replicate: int
    test_mse: float
    cb_radius: float
    cb_covered: float  # 0/1, nan when not applicable or failed
    ci_coverage_avg: float
    log_ml: float
    runtime_s: float
    seed: int
    error: str | None = None

    def __post_init__(self):
        c = self.ci_coverage_avg
        if not (math.isnan(c) or 0.0 <= c <= 1.0):
            raise ValueError("ci_coverage_avg must lie in [0, 1]")

    @classmethod
    def failed(cls, replicate, seed, runtime_s, error):
        nan = math.nan
        return cls(replicate, nan, nan, nan, nan, nan, runtime_s, seed, error)

    def to_row(self):
        row = []
        for name in CSV_FIELDS:
            v = getattr(self, name)
            if name in ("replicate", "seed"):
                row.append(str(int(v)))
            elif name == "cb_covered" and not math.isnan(v):
                row.append(str(int(v)))
            else:
                row.append(repr(float(v)))
        return row


def _run_one(config, replicate):
    seed = replicate_seed(config.master_seed, replicate)
    t0 = time.perf_counter()
    try:
        dataset = generate(config.scenario.replace(seed=seed))
        if config.scenario.design == "demand":
            oracle = _with_seed(config.oracle, child_seed(seed, 3))
            est = fit_exo(dataset, "median", m=config.m, oracle=oracle, seed=seed, num_rff=config.num_rff)
            mse = counterfactual_mse(est, dataset)
            nan = math.nan
            by_level = {lv: {"test_mse": mse, "cb_radius": nan, "cb_covered": nan, "ci_coverage_avg": nan,
                             "log_ml": nan} for lv in config.levels}
        else:
            est, _ = fit_replicate(config, dataset, seed)
            by_level = evaluate_metrics(est, dataset, config.levels, config.n_samples, child_seed(seed, 9))
    except Exception as err:  # one failed replicate must not stop the run
        dt = time.perf_counter() - t0
        msg = f"{type(err).__name__}: {err}\n{traceback.format_exc()}"
        return {lv: MetricsRecord.failed(replicate, seed, dt, msg) for lv in config.levels}
    dt = time.perf_counter() - t0
    return {lv: MetricsRecord(replicate=replicate, runtime_s=dt, seed=seed, **vals) for lv, vals in by_level.items()}


def _level_filename(level, first):
    return "metrics.csv" if first else f"metrics_level_{level:g}.csv"


class _OrderedWriter:
    """Writes finished replicates in replicate order, flushing after each row."""

    def __init__(self, out_dir, levels, replicates):
        self.levels = levels
        self.lock = threading.Lock()
        self.pending = {}
        self.next = 0
        self.replicates = replicates
        self.files = {}
        self.writers = {}
        self.errors = None
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, lv in enumerate(levels):
            fh = open(out_dir / _level_filename(lv, i == 0), "w", newline="")
            self.files[lv] = fh
            self.writers[lv] = csv.writer(fh)
            self.writers[lv].writerow(CSV_FIELDS)
            fh.flush()
        self.error_path = out_dir / "errors.log"

    def submit(self, replicate, by_level):
        with self.lock:
            self.pending[replicate] = by_level
            while self.next in self.pending:
                self._write(self.pending.pop(self.next))
                self.next += 1

    def _write(self, by_level):
        if not self.files:
            return
        for lv in self.levels:
            self.writers[lv].writerow(by_level[lv].to_row())
            self.files[lv].flush()
        rec = by_level[self.levels[0]]
        if rec.error:
            if self.errors is None:
                self.errors = open(self.error_path, "w")
            self.errors.write(f"replicate {rec.replicate} (seed {rec.seed}):\n{rec.error}\n")
            self.errors.flush()

    def close(self):
        for fh in self.files.values():
            fh.close()
        if self.errors is not None:
            self.errors.close()


def run_experiment(config, threads=1, output_dir=None, plots=True, progress=None):
    """Run every replicate; returns the records for the first level in replicate order.

    Metrics CSVs, ``config.json``, ``summary.json`` and plots go to
    ``output_dir`` (or ``config.output_dir``; nothing is written when both
    are None). Rows are written as soon as all earlier replicates are done,
    so the file is identical for any thread count.
    """
    out = output_dir if output_dir is not None else config.output_dir
    out = None if out is None else Path(out)
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    writer = _OrderedWriter(out, config.levels, config.replicates)
    if out is not None:
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    results = {}

    def job(r):
        by_level = _run_one(config, r)
        writer.submit(r, by_level)
        if progress is not None:
            progress(by_level[config.levels[0]])
        return r, by_level

    try:
        if threads == 1:
            for r in range(config.replicates):
                results.update([job(r)])
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results.update(pool.map(job, range(config.replicates)))
    finally:
        writer.close()
    records = [results[r][config.levels[0]] for r in range(config.replicates)]
    if out is not None:
        summary = {f"{lv:g}": summarize([results[r][lv] for r in range(config.replicates)]) for lv in config.levels}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        if plots:
            plot_metrics(records, out)
    return records


# -- aggregation and plots ---------------------------------------------------

def wilson_interval(successes, n, confidence=0.95):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        return (math.nan, math.nan)
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in [0, n]")
    z = stats.norm.ppf(0.5 + confidence / 2)
    p = successes / n
    denom = 1 + z**2 / n
    centre = (p + z**2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return (centre - half, centre + half)


def summarize(records):
    """Mean, sd (ddof 1) and median per metric over successful replicates, plus a Wilson interval for ball coverage."""
    ok = [r for r in records if r.error is None]
    out = {"replicates": len(records), "failed": len(records) - len(ok)}
    for name in ("test_mse", "cb_radius", "ci_coverage_avg", "log_ml", "runtime_s"):
        v = np.array([getattr(r, name) for r in ok], dtype=float)
        v = v[np.isfinite(v)]
        out[name] = {
            "mean": float(v.mean()) if v.size else math.nan,
            "sd": float(v.std(ddof=1)) if v.size > 1 else (0.0 if v.size else math.nan),
            "median": float(np.median(v)) if v.size else math.nan,
            "n": int(v.size),
        }
    cov = np.array([r.cb_covered for r in ok], dtype=float)
    cov = cov[np.isfinite(cov)]
    k, n = int(cov.sum()), int(cov.size)
    out["cb_coverage"] = {"rate": k / n if n else math.nan, "successes": k, "n": n,
                          "wilson95": list(wilson_interval(k, n))}
    return out


def read_metrics(path):
    """Parse a metrics CSV back into records (error text is not stored in the CSV)."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CSV_FIELDS:
            raise ValueError(f"unexpected metrics header {header}")
        recs = []
        for row in rd:
            vals = dict(zip(header, row))
            recs.append(MetricsRecord(replicate=int(vals["replicate"]), seed=int(vals["seed"]),
                                      **{k: float(vals[k]) for k in CSV_FIELDS if k not in ("replicate", "seed")}))
    return recs


def plot_metrics(records, out_dir):
    """One PNG per metric: per-replicate values with the running mean and a +-1 sd band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    reps = np.array([r.replicate for r in records])
    for name in ("test_mse", "cb_radius", "cb_covered", "ci_coverage_avg", "log_ml", "runtime_s"):
        v = np.array([getattr(r, name) for r in records], dtype=float)
        if not np.isfinite(v).any():
            continue
        fin = np.where(np.isfinite(v), v, 0.0)
        cnt = np.cumsum(np.isfinite(v))
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.cumsum(fin) / cnt
            sd = np.sqrt(np.maximum(np.cumsum(fin**2) / cnt - mean**2, 0.0))
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(reps, v, "o", ms=3, alpha=0.6, label="replicate")
        ax.plot(reps, mean, "-", label="running mean")
        ax.fill_between(reps, mean - sd, mean + sd, alpha=0.2)
        ax.set_xlabel("replicate")
        ax.set_ylabel(name)
        ax.legend(loc="best", fontsize=7)
        fig.tight_layout()
        p = out_dir / f"{name}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths


# -- baselines and first-stage sweeps ----------------------------------------

def confounded_baseline_mse(dataset, seed=0):
    """Test MSE of kernel ridge regression of ``y`` on ``x`` alone (stage-2 rows), ignoring the instrument."""
    _, X, Y = dataset.stage2
    reg = fit_oracle(KRRConfig(seed=seed), RegressionTask(_as_2d(X), np.asarray(Y, dtype=float)[:, None]))
    pred = reg.predict(_as_2d(dataset.test_x))[:, 0]
    return float(np.mean((pred - dataset.test_truth) ** 2))


@dataclass(frozen=True)
class FirstStageVariant:
    label: str
    first_stage: str = "learned"
    oracle: object = None  # None: the experiment's oracle
    m: int | None = None
    kz_multiplier: float = 1.0


def default_sweep_variants(config):
    """Eight or nine first stages of visibly different quality for the validation sweep."""
    m = config.m
    variants = [
        FirstStageVariant("learned-config", m=m),
        FirstStageVariant("learned-small-m", m=max(m // 10, 2)),
        FirstStageVariant("learned-krr", oracle=KRRConfig(), m=m),
        FirstStageVariant("learned-rf-ridge", oracle=RFRidgeConfig(num_features=512), m=m),
        FirstStageVariant("learned-mlp", oracle=MLPConfig(), m=m),
        FirstStageVariant("learned-mlp-undertrained", oracle=MLPConfig(hidden_layers=(16,), max_epochs=2, dropout=0.0),
                          m=m),
        FirstStageVariant("rbf-0.25", first_stage="rbf", kz_multiplier=0.25),
        FirstStageVariant("rbf-1", first_stage="rbf"),
        FirstStageVariant("rbf-4", first_stage="rbf", kz_multiplier=4.0),
    ]
    seen, out = set(), []
    for v in variants:  # drop presets identical to the configured oracle
        key = (v.first_stage, v.oracle or config.oracle, v.m, v.kz_multiplier)
        if key not in seen:
            seen.add(key)
            out.append(v)
    return out


def first_stage_sweep(config, variants=None, seed=None, m_v=10):
    """Validation statistic and counterfactual MSE of several first stages on one dataset.

    Returns a list of dict rows (label, the validation terms, test_mse,
    error). A variant that fails gets nan values and the error message.
    """
    seed = config.master_seed if seed is None else seed
    dataset = generate(config.scenario.replace(seed=seed))
    kx = second_stage_kernel(config, dataset)
    rows = []
    for v in variants or default_sweep_variants(config):
        row = {"label": v.label}
        try:
            fm = build_first_stage(v.first_stage, v.oracle or config.oracle, v.m or config.m, dataset, kx, seed,
                                   config.num_rff, v.kz_multiplier)
            rep = first_stage_validation(fm, dataset.stage2, kx, m_v=m_v, seed=seed)
            post = fit_quasi_posterior(dataset.stage2, fm, config.kiv, seed, spec=kx)
            mse = float(np.mean((post.mean(dataset.test_x) - dataset.test_truth) ** 2))
            row.update(task_generalization_mse=rep.task_generalization_mse, reduced_form_mse=rep.reduced_form_mse,
                       validation=rep.total, test_mse=mse, error="")
        except Exception as err:
            row.update(task_generalization_mse=math.nan, reduced_form_mse=math.nan, validation=math.nan,
                       test_mse=math.nan, error=f"{type(err).__name__}: {err}")
        rows.append(row)
    return rows


def sweep_spearman(rows):
    """Spearman correlation between the validation statistic and test MSE over the finished rows."""
    ok = [r for r in rows if np.isfinite(r["validation"]) and np.isfinite(r["test_mse"])]
    if len(ok) < 3:
        return math.nan
    return float(stats.spearmanr([r["validation"] for r in ok], [r["test_mse"] for r in ok])[0])
