from types import SimpleNamespace

import numpy as np
import pytest
import torch

from learned_iv.exo import ExoEstimator, counterfactual_mse, default_theta_config, fit_exo, log_test_mse, predict_exo
from learned_iv.kernels import GPSampleSet, KernelSpec, draw_gp_samples, rff_feature_map
from learned_iv.oracle import MLPConfig, RFRidgeConfig, RegressionTask, _Standardizer, fit_oracle
from learned_iv.simgen import ScenarioConfig, generate_demand


class _Interp:
    def __init__(self, c, Y):
        order = np.argsort(c)
        self.c, self.Y = c[order], Y[order]

    def predict(self, inputs):
        c = np.atleast_2d(inputs)[:, 0]
        return np.column_stack([np.interp(c, self.c, self.Y[:, j]) for j in range(self.Y.shape[1])])


class _InterpOracle:
    """Exact when the treatment is a deterministic function of the instrument (first input column)."""

    def fit(self, task):
        return _Interp(task.inputs[:, 0], task.targets)


def _w_free_data(n, seed, noise=0.3):
    rng = np.random.default_rng(seed)

    def split(k):
        c = rng.normal(size=k)
        return {"c": c, "t": rng.uniform(0, 10, k), "s": rng.integers(1, 8, k).astype(float), "p": c,
                "y": np.sin(c) + noise * rng.normal(size=k)}

    return SimpleNamespace(stage1=split(n), stage2=split(n))


class _Ones(torch.nn.Module):
    def __init__(self, m):
        super().__init__()
        self.m = m

    def forward(self, w):
        return torch.ones(w.shape[0], self.m)


def _frozen_estimator(m=4, regs=None):
    fmap = rff_feature_map(KernelSpec("rbf", 1.0), 256, seed=0)
    draws = draw_gp_samples(fmap, m, seed=1)
    rng = np.random.default_rng(0)
    if regs is None:
        c = rng.normal(size=50)
        regs = _Interp(c, draws(c))
    return ExoEstimator(treatment_samples=draws, stage1_regressors=regs, theta_net=_Ones(m),
                        w_scaler=_Standardizer(rng.normal(size=(20, 2))), threshold=1e6, m=m, w_dim=2,
                        y_mean=0.0, y_scale=1.0)


class TestStructure:
    def test_frozen_theta_identity(self):
        est = _frozen_estimator()
        rng = np.random.default_rng(1)
        xo, w = rng.normal(size=(6, 1)), rng.normal(size=(6, 2))
        np.testing.assert_allclose(predict_exo(est, xo, w), est.treatment_samples(xo).sum(axis=1), atol=1e-12)
        zo = rng.normal(size=6)
        np.testing.assert_allclose(est.reduced_form(zo, w), est.g_hat(zo, w).sum(axis=1), atol=1e-12)

    def test_zero_treatment_sample_gives_zero(self):
        est = _frozen_estimator(m=1)
        flat = GPSampleSet(np.zeros_like(est.treatment_samples.weights), est.treatment_samples.feature_map)
        est = ExoEstimator(**{**est.__dict__, "treatment_samples": flat})
        assert predict_exo(est, [[0.7]], np.zeros((1, 2)))[0] == 0.0

    def test_linear_in_theta_output(self):
        est = _frozen_estimator()
        rng = np.random.default_rng(2)
        xo, w = rng.normal(size=(3, 1)), rng.normal(size=(3, 2))
        F = est.treatment_samples(xo)
        a, b = rng.normal(size=4), rng.normal(size=4)
        combo = np.sum(F * (2 * a - 0.5 * b), axis=1)
        np.testing.assert_allclose(combo, 2 * np.sum(F * a, axis=1) - 0.5 * np.sum(F * b, axis=1), atol=1e-12)
        # the estimator's readout is exactly this inner product
        np.testing.assert_allclose(est.predict(xo, w), np.sum(F * est.theta(w), axis=1), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            _frozen_estimator().predict(np.zeros((2, 1)), np.zeros((2, 3)))

    def test_clamp_applies(self):
        est = _frozen_estimator()
        est = ExoEstimator(**{**est.__dict__, "threshold": 0.1})
        assert np.abs(est.g_hat(np.linspace(-2, 2, 30), np.zeros((30, 2)))).max() <= 0.1


@pytest.fixture(scope="module")
def w_free_fit():
    data = _w_free_data(600, 0)
    theta = default_theta_config(seed=0)
    est = fit_exo(data, KernelSpec("rbf", 1.0), m=16, oracle=_InterpOracle(), theta_cfg=theta, seed=0)
    return data, est


class TestFit:
    def test_reproduces_reduced_form(self, w_free_fit):
        _, est = w_free_fit
        fresh = _w_free_data(2000, 99).stage1
        zo, w = fresh["c"], np.column_stack([fresh["t"], fresh["s"]])
        mse = np.mean((est.reduced_form(zo, w) - fresh["y"]) ** 2)
        assert mse <= 2 * 0.3**2

    def test_early_stopped_loss_not_above_initial(self, w_free_fit):
        hist = w_free_fit[1].history
        assert hist.best_train_loss <= hist.initial_train_loss

    def test_deterministic(self, w_free_fit):
        data, est = w_free_fit
        again = fit_exo(data, KernelSpec("rbf", 1.0), m=16, oracle=_InterpOracle(),
                        theta_cfg=default_theta_config(seed=0), seed=0)
        xo, w = np.linspace(-2, 2, 7)[:, None], np.ones((7, 2))
        np.testing.assert_array_equal(est.predict(xo, w), again.predict(xo, w))
        np.testing.assert_array_equal(est.predict(xo, w), est.predict(xo, w))

    def test_validation(self):
        data = _w_free_data(30, 1)
        with pytest.raises(ValueError):
            fit_exo(data, KernelSpec(), m=0)
        with pytest.raises(ValueError):
            fit_exo(data, KernelSpec(), m=2, theta_cfg=RFRidgeConfig())

    def test_oracle_failure_propagates(self):
        class Broken:
            def fit(self, task):
                raise RuntimeError("no fit")

        with pytest.raises(RuntimeError, match="no fit"):
            fit_exo(_w_free_data(30, 1), KernelSpec(), m=2, oracle=Broken())

    def test_demand_smoke(self):
        data = generate_demand(ScenarioConfig(design="demand", n1=200, n2=200, n_test=300, seed=0))
        theta = MLPConfig(hidden_layers=(32, 16), dropout=0.0, max_epochs=60, patience=10, batch_size=64)
        est = fit_exo(data, "median", m=8, theta_cfg=theta, seed=0)
        mse = counterfactual_mse(est, data)
        assert np.isfinite(mse) and log_test_mse(est, data) == pytest.approx(np.log10(mse))
        assert mse < np.var(data.test["y"])


@pytest.mark.slow
def test_beats_confounded_regression_on_demand():
    wins = 0
    for seed in range(10):
        data = generate_demand(ScenarioConfig(design="demand", n1=2500, n2=2500, n_test=2000, seed=seed))
        est = fit_exo(data, "median", seed=seed)
        ours = counterfactual_mse(est, data)
        both = {k: np.concatenate([data.stage1[k], data.stage2[k]]) for k in ("p", "t", "s", "y")}
        naive = fit_oracle(RFRidgeConfig(num_features=1024, seed=seed),
                           RegressionTask(np.column_stack([both["p"], both["t"], both["s"]]), both["y"]))
        te = data.test
        base = np.mean((naive.predict(np.column_stack([te["p"], te["t"], te["s"]]))[:, 0] - te["y"]) ** 2)
        wins += ours < base
    assert wins >= 8
