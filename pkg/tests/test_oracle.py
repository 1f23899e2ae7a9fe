import json

import numpy as np
import pytest

from learned_iv.kernels import KernelSpec
from learned_iv.mlp import read_weights
from learned_iv.oracle import (
    KRRConfig,
    MLPConfig,
    RegressionTask,
    RFRidgeConfig,
    fit_oracle,
    oracle_from_dict,
    predict,
)


def _smooth_task(n=120, q=3, seed=0, holdout=0.0):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-2, 2, size=(n, 2))
    Y = np.column_stack([np.sin(Z[:, 0] * (j + 1)) + 0.1 * rng.normal(size=n) for j in range(q)])
    return RegressionTask(Z, Y, holdout)


class TestTask:
    def test_row_mismatch(self):
        with pytest.raises(ValueError, match="matching rows"):
            RegressionTask(np.zeros((3, 1)), np.zeros((4, 1)))

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            RegressionTask(np.array([[np.inf]]), np.zeros((1, 1)))

    def test_holdout_needs_rows(self):
        with pytest.raises(ValueError):
            RegressionTask(np.zeros((3, 1)), np.zeros((3, 1)), holdout_fraction=0.5)


class TestKRR:
    def test_line_interpolation(self):
        task = RegressionTask([[0.0], [1.0]], [[0.0], [1.0]])
        reg = fit_oracle(KRRConfig(KernelSpec("linear"), ridge_grid=(1e-10,)), task)
        assert predict(reg, [[0.5]])[0, 0] == pytest.approx(0.5, abs=1e-6)

    def test_near_interpolation_rbf(self):
        rng = np.random.default_rng(2)
        Z = rng.normal(size=(30, 2))
        y = np.cos(Z[:, 0]) + Z[:, 1]
        reg = fit_oracle(KRRConfig(KernelSpec("rbf", 1.0), ridge_grid=(1e-8,)), RegressionTask(Z, y))
        np.testing.assert_allclose(reg.predict(Z[:5])[:, 0], y[:5], atol=1e-3)

    def test_shape(self):
        task = _smooth_task()
        reg = fit_oracle(KRRConfig(), task)
        assert predict(reg, task.inputs).shape == (120, 3)
        assert reg.output_dim == 3

    def test_linear_in_targets(self):
        rng = np.random.default_rng(3)
        Z = rng.normal(size=(40, 2))
        Y1, Y2 = rng.normal(size=(40, 1)), rng.normal(size=(40, 1))
        cfg = KRRConfig(ridge_grid=(0.1,))
        a, b = 2.0, -0.7
        combo = fit_oracle(cfg, RegressionTask(Z, a * Y1 + b * Y2)).predict(Z)
        sep = a * fit_oracle(cfg, RegressionTask(Z, Y1)).predict(Z) + b * fit_oracle(cfg, RegressionTask(Z, Y2)).predict(Z)
        np.testing.assert_allclose(combo, sep, atol=1e-10)

    def test_shared_factorisation_equals_separate(self):
        task = _smooth_task(q=4)
        cfg = KRRConfig(ridge_grid=(0.3,))
        joint = fit_oracle(cfg, task).predict(task.inputs)
        for j in range(4):
            single = fit_oracle(cfg, RegressionTask(task.inputs, task.targets[:, j])).predict(task.inputs)
            np.testing.assert_allclose(joint[:, j], single[:, 0], atol=1e-10)

    def test_ridge_shrinks_dual_norm(self):
        task = _smooth_task(q=1)
        norms = [np.linalg.norm(fit_oracle(KRRConfig(ridge_grid=(r,)), task).dual_coef)
                 for r in [1e-3, 1e-2, 1e-1, 1.0, 10.0]]
        assert np.all(np.diff(norms) < 0)

    def test_gcv_and_holdout_choose_from_grid(self):
        grid = (1e-4, 1e-2, 1.0, 100.0)
        for holdout in (0.0, 0.3):
            reg = fit_oracle(KRRConfig(ridge_grid=grid), _smooth_task(holdout=holdout))
            assert reg.ridge in grid
            assert reg.ridge < 100.0

    def test_deterministic(self):
        task = _smooth_task(holdout=0.25)
        p1 = fit_oracle(KRRConfig(seed=4), task).predict(task.inputs)
        p2 = fit_oracle(KRRConfig(seed=4), task).predict(task.inputs)
        np.testing.assert_array_equal(p1, p2)

    def test_dimension_mismatch(self):
        reg = fit_oracle(KRRConfig(), _smooth_task())
        with pytest.raises(ValueError, match="dimension"):
            reg.predict(np.zeros((2, 3)))

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            KRRConfig(ridge_grid=())
        with pytest.raises(ValueError):
            KRRConfig(ridge_grid=(0.1, -1.0))


class TestRFRidge:
    def test_fits_smooth_function(self):
        task = _smooth_task(n=300, q=2)
        reg = fit_oracle(RFRidgeConfig(num_features=512), task)
        resid = reg.predict(task.inputs) - task.targets
        assert np.mean(resid**2) < 0.05
        assert reg.predict(task.inputs[:3]).shape == (3, 2)

    def test_holdout_path(self):
        reg = fit_oracle(RFRidgeConfig(num_features=256, seed=1), _smooth_task(holdout=0.3))
        assert reg.ridge in RFRidgeConfig().ridge_grid


@pytest.fixture(scope="module")
def sin_fit():
    rng = np.random.default_rng(0)
    z = rng.uniform(-3, 3, size=(500, 1))
    task = RegressionTask(z, np.sin(z), holdout_fraction=0.2)
    cfg = MLPConfig(hidden_layers=(64, 64), dropout=0.0, learning_rate=5e-3,
                    max_epochs=400, patience=40, batch_size=64, seed=0)
    return task, cfg, fit_oracle(cfg, task)


class TestMLP:
    def test_sin_holdout_rmse(self, sin_fit):
        task, cfg, reg = sin_fit
        _, ho = task.split(cfg.seed)
        rmse = np.sqrt(np.mean((reg.predict(task.inputs[ho]) - task.targets[ho]) ** 2))
        assert rmse <= 0.1

    def test_early_stopped_loss_below_initial(self, sin_fit):
        hist = sin_fit[2].history
        assert hist.best_train_loss <= hist.initial_train_loss

    def test_pure_predict(self, sin_fit):
        reg = sin_fit[2]
        Z = np.linspace(-3, 3, 11)[:, None]
        np.testing.assert_array_equal(reg.predict(Z), reg.predict(Z))

    def test_deterministic_refit(self):
        task = _smooth_task(n=80, q=2, holdout=0.25)
        cfg = MLPConfig(hidden_layers=(16,), max_epochs=15, seed=3)
        np.testing.assert_array_equal(fit_oracle(cfg, task).predict(task.inputs),
                                      fit_oracle(cfg, task).predict(task.inputs))

    def test_default_architecture(self):
        cfg = MLPConfig()
        assert cfg.hidden_layers == (100, 100, 100)
        assert cfg.activation == "swish" and cfg.learning_rate == 1e-3 and cfg.dropout == 0.2

    def test_nan_loss_raises_with_epoch(self):
        task = RegressionTask(np.random.default_rng(0).normal(size=(40, 1)), np.full((40, 1), 1e30))
        cfg = MLPConfig(hidden_layers=(8,), learning_rate=10.0, max_epochs=50)
        with pytest.raises(FloatingPointError, match="epoch"):
            fit_oracle(cfg, task)

    def test_weight_export(self, tmp_path, sin_fit):
        reg = sin_fit[2]
        path = tmp_path / "w.bin"
        reg.export_weights(path)
        header, arrays = read_weights(path)
        assert header["shapes"][0] == [64, 1]
        state = list(reg.model.state_dict().values())
        for got, want in zip(arrays, state):
            np.testing.assert_array_equal(got, want.numpy().astype(np.float64))

    @pytest.mark.parametrize("bad", [dict(hidden_layers=()), dict(activation="gelu"), dict(dropout=1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            MLPConfig(**bad)


@pytest.mark.parametrize("cfg", [
    KRRConfig(),
    KRRConfig(kernel=KernelSpec("matern32", 0.5, 2.0), ridge_grid=(0.1, 1.0), seed=3),
    RFRidgeConfig(num_features=64),
    MLPConfig(hidden_layers=(10, 5), activation="tanh", dropout=0.05, seed=9),
])
def test_config_round_trip(cfg):
    again = oracle_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown oracle kind"):
        oracle_from_dict({"kind": "forest"})
