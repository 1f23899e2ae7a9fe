import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from learned_iv import cli, harness
from learned_iv.harness import (
    CSV_FIELDS,
    BMAGrid,
    ConfigError,
    ExperimentConfig,
    FirstStageVariant,
    MetricsRecord,
    evaluate_metrics,
    first_stage_sweep,
    load_config,
    read_metrics,
    run_experiment,
    summarize,
    wilson_interval,
)
from learned_iv.kiv import CredibleSummary
from learned_iv.simgen import ScenarioConfig

TINY = ExperimentConfig(scenario=ScenarioConfig(n1=64, n2=64, n_test=40, pilot_size=2000), m=8, replicates=1,
                        n_samples=300, num_rff=512)


def _body(path, drop=("runtime_s",)):
    lines = path.read_text().splitlines()
    keep = [i for i, name in enumerate(CSV_FIELDS) if name not in drop]
    return [[row.split(",")[i] for i in keep] for row in lines[1:]]


class _Exact:
    """Posterior stand-in centred on a given function with a fixed pointwise spread."""

    def __init__(self, f, sd=0.5):
        self.f, self.sd = f, sd

    def credible_summaries(self, Xs, level, n_samples, seed):
        m = self.f(Xs)
        return CredibleSummary(mean=m, sd=np.full_like(m, self.sd), ci_lower=m - self.sd, ci_upper=m + self.sd,
                               ball_radius=self.sd, level=level)

    def log_marginal_quasi_likelihood(self):
        return -1.0


class TestMetrics:
    def setup_method(self):
        x = np.linspace(-2, 2, 30)
        self.ds = SimpleNamespace(test_x=x, test_truth=np.sin(x))

    def test_exact_posterior(self):
        m = evaluate_metrics(_Exact(np.sin), self.ds, levels=[0.9])[0.9]
        assert m["test_mse"] == 0.0 and m["cb_covered"] == 1 and m["ci_coverage_avg"] == 1.0

    def test_shifted_truth(self):
        m = evaluate_metrics(_Exact(lambda x: np.sin(x) + 3.0), self.ds)[0.9]
        assert m["ci_coverage_avg"] == 0.0 and m["cb_covered"] == 0
        assert m["test_mse"] == pytest.approx(9.0)

    def test_levels_keyed(self):
        out = evaluate_metrics(_Exact(np.sin), self.ds, levels=[0.5, 0.9])
        assert list(out) == [0.5, 0.9]


class TestAggregation:
    def test_wilson_hand_value(self):
        lo, hi = wilson_interval(27, 30)
        assert lo == pytest.approx(0.744, abs=5e-4) and hi == pytest.approx(0.965, abs=5e-4)

    def test_wilson_edges(self):
        lo, hi = wilson_interval(0, 10)
        assert lo == pytest.approx(0.0, abs=1e-12) and 0 < hi < 0.35
        lo, hi = wilson_interval(10, 10)
        assert hi == pytest.approx(1.0) and lo > 0.65
        assert all(math.isnan(v) for v in wilson_interval(0, 0))
        with pytest.raises(ValueError):
            wilson_interval(5, 4)

    def test_summarize_skips_failures(self):
        recs = [MetricsRecord(0, 0.1, 0.5, 1, 0.9, -2.0, 1.0, 11), MetricsRecord(1, 0.3, 0.4, 0, 0.7, -3.0, 1.0, 12),
                MetricsRecord.failed(2, 13, 0.5, "boom")]
        s = summarize(recs)
        assert s["failed"] == 1 and s["test_mse"]["n"] == 2
        assert s["test_mse"]["mean"] == pytest.approx(0.2)
        assert s["test_mse"]["sd"] == pytest.approx(np.std([0.1, 0.3], ddof=1))
        assert s["cb_coverage"]["successes"] == 1 and s["cb_coverage"]["n"] == 2

    def test_record_invariant(self):
        with pytest.raises(ValueError):
            MetricsRecord(0, 0.1, 0.5, 1, 1.2, -2.0, 1.0, 0)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = TINY.replace(bma_grid=BMAGrid(), levels=(0.9, 0.95), first_stage="rbf")
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_config(path) == cfg

    def test_seed_env_override(self, tmp_path, monkeypatch):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"master_seed": 4}))
        assert load_config(path).master_seed == 4
        monkeypatch.setenv("LEARNED_IV_SEED", "17")
        assert load_config(path).master_seed == 17
        monkeypatch.setenv("LEARNED_IV_SEED", "x")
        with pytest.raises(ConfigError):
            load_config(path)

    @pytest.mark.parametrize("bad", [{"replicates": 0}, {"m": 0}, {"levels": [1.5]}, {"first_stage": "cnn"},
                                     {"unknown": 1}, {"scenario": {"design": "image"}},
                                     {"oracle": {"kind": "forest"}}, {"bma_grid": {"sigmas": []}}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)


class TestRun:
    def test_smoke_one_record(self, tmp_path):
        recs = run_experiment(TINY, output_dir=tmp_path, plots=False)
        assert len(recs) == 1 and recs[0].error is None
        r = recs[0]
        assert np.isfinite([r.test_mse, r.cb_radius, r.log_ml]).all() and r.cb_covered in (0, 1)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "replicate,test_mse,cb_radius,cb_covered,ci_coverage_avg,log_ml,runtime_s,seed"
        assert len(lines) == 2
        assert read_metrics(tmp_path / "metrics.csv")[0].test_mse == r.test_mse

    def test_deterministic_across_runs_and_threads(self, tmp_path):
        cfg = TINY.replace(replicates=3, master_seed=5)
        run_experiment(cfg, output_dir=tmp_path / "a", plots=False)
        run_experiment(cfg, output_dir=tmp_path / "b", plots=False)
        run_experiment(cfg, threads=3, output_dir=tmp_path / "c", plots=False)
        a = _body(tmp_path / "a" / "metrics.csv")
        assert a == _body(tmp_path / "b" / "metrics.csv") == _body(tmp_path / "c" / "metrics.csv")
        assert [row[0] for row in a] == ["0", "1", "2"]
        assert len({row[-1] for row in a}) == 3  # distinct child seeds

    def test_failed_replicate_becomes_error_row(self, tmp_path, monkeypatch):
        real = harness.fit_replicate
        bad_seed = harness.replicate_seed(0, 1)

        def flaky(config, dataset, seed):
            if seed == bad_seed:
                raise np.linalg.LinAlgError("not positive definite")
            return real(config, dataset, seed)

        monkeypatch.setattr(harness, "fit_replicate", flaky)
        recs = run_experiment(TINY.replace(replicates=3), output_dir=tmp_path, plots=False)
        assert [r.error is None for r in recs] == [True, False, True]
        assert "LinAlgError" in recs[1].error
        rows = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(rows) == 4 and "nan" in rows[2]
        assert "replicate 1" in (tmp_path / "errors.log").read_text()
        assert json.loads((tmp_path / "summary.json").read_text())["0.9"]["failed"] == 1

    def test_extra_levels_and_plots(self, tmp_path):
        run_experiment(TINY.replace(levels=(0.9, 0.5)), output_dir=tmp_path)
        r90 = read_metrics(tmp_path / "metrics.csv")[0]
        r50 = read_metrics(tmp_path / "metrics_level_0.5.csv")[0]
        assert r50.cb_radius < r90.cb_radius and r50.test_mse == r90.test_mse
        assert (tmp_path / "test_mse.png").exists()

    def test_rbf_first_stage_and_bma(self):
        rec = run_experiment(TINY.replace(first_stage="rbf"))[0]
        assert rec.error is None
        grid = BMAGrid(sigmas=(0.5, 1.0), bandwidth_multipliers=(0.5, 1.0))
        rec = run_experiment(TINY.replace(bma_grid=grid))[0]
        assert rec.error is None and np.isfinite(rec.log_ml)

    def test_demand_design(self):
        cfg = TINY.replace(scenario=ScenarioConfig(design="demand", n1=150, n2=150, n_test=100), m=4)
        rec = run_experiment(cfg)[0]
        assert rec.error is None and rec.test_mse > 0 and math.isnan(rec.cb_radius)

    def test_sweep(self):
        rows = first_stage_sweep(TINY, [FirstStageVariant("learned"), FirstStageVariant("rbf", first_stage="rbf"),
                                        FirstStageVariant("broken", first_stage="learned", m=-1)])
        assert [r["label"] for r in rows] == ["learned", "rbf", "broken"]
        assert np.isfinite(rows[0]["validation"]) and np.isfinite(rows[1]["test_mse"])
        assert rows[2]["error"] and math.isnan(rows[2]["validation"])


@pytest.mark.slow
def test_high_dimensional_replicate_runtime():
    cfg = ExperimentConfig(scenario=ScenarioConfig(design="nn", D=100, f0="abs", n1=2500, n2=2500), m=100)
    t0 = time.perf_counter()
    rec = run_experiment(cfg)[0]
    assert rec.error is None
    assert time.perf_counter() - t0 < 120


class TestCLI:
    def _config(self, tmp_path, **extra):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({**TINY.to_dict(), **extra}))
        return str(path)

    def test_simulate_fit_experiment(self, tmp_path, capsys):
        c = self._config(tmp_path)
        assert cli.main(["simulate", "--config", c, "--out", str(tmp_path / "d")]) == 0
        out = tmp_path / "s.csv"
        assert cli.main(["fit", "--data", str(tmp_path / "d" / "stage2.csv"), "--config", c, "--out", str(out),
                         "--grid", "25"]) == 0
        assert out.read_text().splitlines()[0] == "x*,mean,sd,ci_lo,ci_hi"
        assert cli.main(["experiment", "--config", c, "--replicates", "2", "--out", str(tmp_path / "r")]) == 0
        assert len((tmp_path / "r" / "metrics.csv").read_text().splitlines()) == 3
        assert '"replicates": 2' in capsys.readouterr().out

    def test_bma_and_validate(self, tmp_path):
        c = self._config(tmp_path, bma_grid={"sigmas": [1.0, 2.0], "bandwidth_multipliers": [1.0]})
        assert cli.main(["bma", "--config", c, "--out", str(tmp_path / "b")]) == 0
        w = json.loads((tmp_path / "b" / "bma_weights.json").read_text())
        assert len(w) == 2 and sum(r["weight"] for r in w) == pytest.approx(1.0)
        assert set(w[0]) == {"sigma", "h", "log_ml", "weight"}
        assert cli.main(["validate", "--config", c, "--out", str(tmp_path / "v"), "--m-v", "2"]) == 0
        assert (tmp_path / "v" / "validation.csv").exists()

    def test_config_errors(self, tmp_path):
        assert cli.main(["experiment", "--config", str(tmp_path / "missing.json")]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["simulate", "--config", str(bad)]) == 2
        assert cli.main(["experiment", "--config", self._config(tmp_path, replicates=0)]) == 2

    def test_numerical_failure(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise np.linalg.LinAlgError("matrix not positive definite")

        monkeypatch.setattr(harness, "fit_replicate", boom)
        assert cli.main(["experiment", "--config", self._config(tmp_path), "--out", str(tmp_path / "r")]) == 3

    def test_seed_env(self, tmp_path, monkeypatch):
        c = self._config(tmp_path)
        monkeypatch.setenv("LEARNED_IV_SEED", "9")
        assert cli.main(["experiment", "--config", c, "--out", str(tmp_path / "r")]) == 0
        seed = int((tmp_path / "r" / "metrics.csv").read_text().splitlines()[1].split(",")[-1])
        assert seed == harness.replicate_seed(9, 0)
