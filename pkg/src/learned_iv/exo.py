"""IV regression with exogenous covariates through a learned tensor-product basis.

The structural function is modelled as ``f(x_o, w) = sum_j f_j(x_o) theta_j(w)``
where ``f_j`` are prior draws over the endogenous treatment and
``theta(w)`` is a network. Conditional expectations ``g_j(z_o, w) =
E[f_j(x_o) | z_o, w]`` come from a regression oracle; since ``w`` is
exogenous, ``E[f(x_o, w) | z_o, w] = sum_j g_j(z_o, w) theta_j(w)``, so
``theta`` is trained by least squares of ``y`` on that expression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import mlp as _mlp
from ._rng import child_seed
from .kernels import DEFAULT_NUM_RFF, _as_2d, draw_gp_samples, median_heuristic, rff_feature_map, KernelSpec
from .learned_kernel import DEFAULT_CLAMP_CONSTANT, clamp_threshold
from .oracle import KRRConfig, MLPConfig, RegressionTask, _Standardizer, fit_oracle

DEFAULT_EXO_M = 32


def default_theta_config(seed=0):
    """[128, 64, 32] swish network, no dropout."""
    return MLPConfig(hidden_layers=(128, 64, 32), activation="swish", dropout=0.0, learning_rate=1e-3,
                     max_epochs=400, patience=30, batch_size=64, seed=seed)


@dataclass(frozen=True, eq=False)
class ExoEstimator:
    treatment_samples: object  # GPSampleSet over x_o
    stage1_regressors: object  # fitted oracle, inputs (z_o, w), m outputs
    theta_net: torch.nn.Module
    w_scaler: _Standardizer
    threshold: float
    m: int
    w_dim: int
    y_mean: float
    y_scale: float
    history: object = None

    def g_hat(self, zo, w):
        """Clamped stage-1 estimates ``g_j(z_o, w)``, shape ``n x m``."""
        inputs = np.column_stack([_as_2d(zo), self._w(w)])
        return np.clip(self.stage1_regressors.predict(inputs), -self.threshold, self.threshold)

    def _w(self, w):
        w = _as_2d(w)
        if w.shape[1] != self.w_dim:
            raise ValueError(f"dimension mismatch: covariates have {self.w_dim} columns, got {w.shape[1]}")
        return w

    def theta(self, w):
        """Network outputs ``theta(w)``, shape ``n x m``."""
        ws = torch.as_tensor(self.w_scaler(self._w(w)), dtype=torch.float32)
        with torch.no_grad():
            return self.theta_net(ws).numpy().astype(np.float64)

    def reduced_form(self, zo, w):
        return self._unscale(np.sum(self.g_hat(zo, w) * self.theta(w), axis=1))

    def _unscale(self, v):
        return self.y_mean + self.y_scale * v

    def predict(self, xo, w):
        xo = _as_2d(xo)
        F = self.treatment_samples(xo)
        return self._unscale(np.sum(F * self.theta(w), axis=1))


def predict_exo(est, xo, w):
    return est.predict(xo, w)


def _split_arrays(split):
    zo = np.asarray(split["c"], dtype=float)[:, None]
    w = np.column_stack([split["t"], split["s"]])
    return zo, w, np.asarray(split["p"], dtype=float)[:, None], np.asarray(split["y"], dtype=float)


def fit_exo(data, k_xo, m=DEFAULT_EXO_M, oracle=None, theta_cfg=None, seed=0, *,
            clamp_constant=DEFAULT_CLAMP_CONSTANT, num_rff=DEFAULT_NUM_RFF):
    """Fit the exogenous-covariate estimator on an ``ExoDataset``-like object.

    Parameters
    ----------
    data
        Object with ``stage1``/``stage2`` dicts holding ``c, t, s, p, y``.
    k_xo : KernelSpec or "median"
        Prior kernel over the treatment; ``"median"`` uses an RBF kernel
        with the stage-1 median heuristic bandwidth.
    oracle
        Stage-1 oracle config (default: kernel ridge with GCV).
    theta_cfg : MLPConfig
        Architecture and training settings of the theta network. Early
        stopping monitors the reduced-form loss on stage-1 rows.

    Stage-2 responses are standardised internally; predictions are on the
    original scale.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    theta_cfg = theta_cfg or default_theta_config(seed)
    if not isinstance(theta_cfg, MLPConfig):
        raise ValueError("theta_cfg must be an MLPConfig")
    oracle = oracle or KRRConfig(seed=seed)
    zo1, w1, xo1, y1 = _split_arrays(data.stage1)
    zo2, w2, _, y2 = _split_arrays(data.stage2)
    if isinstance(k_xo, str):
        k_xo = KernelSpec("rbf", median_heuristic(xo1), 1.0)

    fmap = rff_feature_map(k_xo, num_rff, seed=child_seed(seed, 1), input_dim=1)
    draws = draw_gp_samples(fmap, m, seed=child_seed(seed, 2))
    holdout = 0.2 if isinstance(oracle, MLPConfig) else 0.0
    regs = fit_oracle(oracle, RegressionTask(np.column_stack([zo1, w1]), draws(xo1), holdout))
    tau = clamp_threshold(m, clamp_constant)

    G1 = np.clip(regs.predict(np.column_stack([zo1, w1])), -tau, tau)
    G2 = np.clip(regs.predict(np.column_stack([zo2, w2])), -tau, tau)
    y_mean, y_scale = float(y2.mean()), float(y2.std()) or 1.0
    w_scaler = _Standardizer(w2)

    def t(a):
        return torch.as_tensor(a, dtype=torch.float32)

    W2, W1, G2t, G1t = t(w_scaler(w2)), t(w_scaler(w1)), t(G2), t(G1)
    Y2, Y1 = t((y2 - y_mean) / y_scale), t((y1 - y_mean) / y_scale)
    with _mlp.seeded(theta_cfg.seed):
        net = _mlp.build_mlp(W2.shape[1], theta_cfg.hidden_layers, m, theta_cfg.activation, theta_cfg.dropout)

        def loss(W, G, Y):
            return torch.mean((torch.sum(G * net(W), dim=1) - Y) ** 2)

        hist = _mlp.train(
            net,
            batch_loss=lambda idx: loss(W2[idx], G2t[idx], Y2[idx]),
            full_train_loss=lambda: loss(W2, G2t, Y2),
            val_loss=lambda: loss(W1, G1t, Y1),
            n_train=len(y2),
            learning_rate=theta_cfg.learning_rate,
            max_epochs=theta_cfg.max_epochs,
            patience=theta_cfg.patience,
            batch_size=theta_cfg.batch_size,
            weight_decay=theta_cfg.weight_decay,
            seed=theta_cfg.seed,
        )
    return ExoEstimator(treatment_samples=draws, stage1_regressors=regs, theta_net=net, w_scaler=w_scaler,
                        threshold=tau, m=m, w_dim=w2.shape[1], y_mean=y_mean, y_scale=y_scale, history=hist)


def counterfactual_mse(est, data):
    """MSE against the structural truth on the dataset's test points."""
    te = data.test
    pred = est.predict(np.asarray(te["p"])[:, None], np.column_stack([te["t"], te["s"]]))
    return float(np.mean((pred - te["y"]) ** 2))


def log_test_mse(est, data):
    """Base-10 logarithm, the scale on which demand-design results are usually tabulated."""
    return math.log10(counterfactual_mse(est, data))
