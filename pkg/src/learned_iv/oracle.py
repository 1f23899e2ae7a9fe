"""Black-box regression oracles used to denoise prior draws and fit E[y | z].

Three learners share one contract: ``config.fit(task)`` returns a fitted
regressor whose ``predict`` maps an ``n x d`` input matrix to ``n x q``
outputs. Vector-valued targets are fitted as a single model (one shared
factorisation for the kernel learners, one shared trunk for the MLP).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import torch

from . import mlp as _mlp
from ._rng import child_rng
from .kernels import KernelSpec, gram, median_heuristic, rff_feature_map

MEDIAN_AUTO = "median-auto"
DEFAULT_RIDGE_GRID = tuple(float(r) for r in np.logspace(-3, 3, 13))


@dataclass(frozen=True, eq=False)
class RegressionTask:
    inputs: np.ndarray
    targets: np.ndarray
    holdout_fraction: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        Y = np.asarray(self.targets, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        Y = Y[:, None] if Y.ndim == 1 else Y
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError(f"inputs {X.shape} and targets {Y.shape} must have matching rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("task contains non-finite entries")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.holdout_fraction > 0 and X.shape[0] < 4:
            raise ValueError("need at least 4 rows to hold out a validation split")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    @property
    def n(self):
        return self.inputs.shape[0]

    def split(self, seed):
        """Seeded (train, holdout) index arrays."""
        perm = child_rng(seed, 21).permutation(self.n)
        n_hold = min(self.n - 2, max(2, int(round(self.holdout_fraction * self.n))))
        return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


class _Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    def __call__(self, X):
        return (X - self.mean) / self.std


def _check_dim(Z, d):
    Z = np.asarray(Z, dtype=float)
    Z = Z[:, None] if Z.ndim == 1 else Z
    if Z.shape[1] != d:
        raise ValueError(f"dimension mismatch: regressor expects {d} input columns, got {Z.shape[1]}")
    return Z


def _check_grid(grid):
    grid = tuple(float(r) for r in grid)
    if not grid or any(not (r > 0) for r in grid):
        raise ValueError("ridge_grid must be a nonempty list of positive values")
    return grid


def _resolve_kernel(kernel, Xs):
    if isinstance(kernel, KernelSpec):
        return kernel
    if kernel != MEDIAN_AUTO:
        raise ValueError(f"kernel must be a KernelSpec or {MEDIAN_AUTO!r}")
    return KernelSpec("rbf", median_heuristic(Xs), 1.0)


def _gcv_select(S, UtY, ridge_grid, n, outside=0.0):
    """Generalised cross-validation over a ridge grid.

    ``S`` are eigenvalues of the kernel (or feature) Gram, ``UtY`` the
    centred targets rotated into its eigenbasis and ``outside`` the target
    energy orthogonal to that basis, which no ridge value can fit.
    """
    S = np.clip(S, 0.0, None)
    scores = []
    for r in ridge_grid:
        rss = np.sum(((r / (S + r))[:, None] * UtY) ** 2) + outside
        dof = np.sum(S / (S + r))
        scores.append((rss / n) / max(1.0 - dof / n, 1e-12) ** 2)
    return ridge_grid[int(np.argmin(scores))]


# -- kernel ridge -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedKRR:
    kernel: KernelSpec
    X_train: np.ndarray  # standardised
    dual_coef: np.ndarray
    y_mean: np.ndarray
    scaler: _Standardizer
    ridge: float

    @property
    def input_dim(self):
        return self.X_train.shape[1]

    @property
    def output_dim(self):
        return self.dual_coef.shape[1]

    def predict(self, Z):
        Zs = self.scaler(_check_dim(Z, self.input_dim))
        return gram(self.kernel, Zs, self.X_train) @ self.dual_coef + self.y_mean


def _krr_solve(K, Yc, ridge):
    try:
        cf = scipy.linalg.cho_factor(K + ridge * np.eye(K.shape[0]), lower=True)
    except np.linalg.LinAlgError:
        jitter = 1e-8 * max(float(np.mean(np.diag(K))), 1.0)
        try:
            cf = scipy.linalg.cho_factor(K + (ridge + jitter) * np.eye(K.shape[0]), lower=True)
        except np.linalg.LinAlgError as err:
            raise np.linalg.LinAlgError(f"KRR system singular after jitter (ridge={ridge})") from err
    return scipy.linalg.cho_solve(cf, Yc)


@dataclass(frozen=True)
class KRRConfig:
    """Kernel ridge regression with the ridge picked on a grid.

    The ridge enters as ``(K + ridge * I) alpha = y - mean(y)``. It is
    chosen by holdout MSE when the task requests a holdout, otherwise by
    generalised cross-validation; the final fit uses all rows.
    """

    kernel: object = MEDIAN_AUTO
    ridge_grid: tuple = DEFAULT_RIDGE_GRID
    seed: int = 0
    kind: str = field(default="krr", init=False)

    def __post_init__(self):
        object.__setattr__(self, "ridge_grid", _check_grid(self.ridge_grid))

    def fit(self, task):
        scaler = _Standardizer(task.inputs)
        Xs = scaler(task.inputs)
        kernel = _resolve_kernel(self.kernel, Xs)
        Y = task.targets
        if len(self.ridge_grid) == 1:
            ridge = self.ridge_grid[0]
        elif task.holdout_fraction > 0:
            tr, ho = task.split(self.seed)
            Ktr = gram(kernel, Xs[tr], Xs[tr])
            Kho = gram(kernel, Xs[ho], Xs[tr])
            mu = Y[tr].mean(axis=0)
            S, U = np.linalg.eigh(Ktr)
            S = np.clip(S, 0.0, None)
            UtY = U.T @ (Y[tr] - mu)
            errs = [np.mean((Kho @ (U @ (UtY / (S + r)[:, None])) + mu - Y[ho]) ** 2)
                    for r in self.ridge_grid]
            ridge = self.ridge_grid[int(np.argmin(errs))]
        else:
            K = gram(kernel, Xs, Xs)
            S, U = np.linalg.eigh(K)
            ridge = _gcv_select(S, U.T @ (Y - Y.mean(axis=0)), self.ridge_grid, task.n)
        K = gram(kernel, Xs, Xs)
        y_mean = Y.mean(axis=0)
        alpha = _krr_solve(K, Y - y_mean, ridge)
        return FittedKRR(kernel=kernel, X_train=Xs, dual_coef=alpha, y_mean=y_mean, scaler=scaler,
                         ridge=ridge)

    def to_dict(self):
        k = self.kernel.to_dict() if isinstance(self.kernel, KernelSpec) else self.kernel
        return {"kind": "krr", "kernel": k, "ridge_grid": list(self.ridge_grid), "seed": self.seed}


# -- random-feature ridge ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedRFRidge:
    feature_map: object
    coef: np.ndarray
    y_mean: np.ndarray
    scaler: _Standardizer
    ridge: float

    @property
    def input_dim(self):
        return self.feature_map.input_dim

    @property
    def output_dim(self):
        return self.coef.shape[1]

    def predict(self, Z):
        Zs = self.scaler(_check_dim(Z, self.input_dim))
        return self.feature_map(Zs) @ self.coef + self.y_mean


@dataclass(frozen=True)
class RFRidgeConfig:
    """Primal ridge regression on random Fourier features of an RBF kernel."""

    num_features: int = 1024
    ridge_grid: tuple = DEFAULT_RIDGE_GRID
    kernel: object = MEDIAN_AUTO
    seed: int = 0
    kind: str = field(default="rf_ridge", init=False)

    def __post_init__(self):
        object.__setattr__(self, "ridge_grid", _check_grid(self.ridge_grid))
        if self.num_features < 1:
            raise ValueError("num_features must be >= 1")

    def fit(self, task):
        scaler = _Standardizer(task.inputs)
        Xs = scaler(task.inputs)
        kernel = _resolve_kernel(self.kernel, Xs)
        fmap = rff_feature_map(kernel, self.num_features, seed=self.seed, input_dim=Xs.shape[1])
        Y = task.targets

        def solve(P, Yc, r):
            return np.linalg.solve(P.T @ P + r * np.eye(P.shape[1]), P.T @ Yc)

        P = fmap(Xs)
        if len(self.ridge_grid) == 1:
            ridge = self.ridge_grid[0]
        elif task.holdout_fraction > 0:
            tr, ho = task.split(self.seed)
            mu = Y[tr].mean(axis=0)
            errs = [np.mean((P[ho] @ solve(P[tr], Y[tr] - mu, r) + mu - Y[ho]) ** 2)
                    for r in self.ridge_grid]
            ridge = self.ridge_grid[int(np.argmin(errs))]
        else:
            U, s, _ = np.linalg.svd(P, full_matrices=False)
            Yc = Y - Y.mean(axis=0)
            UtY = U.T @ Yc
            outside = np.sum(Yc**2) - np.sum(UtY**2)
            ridge = _gcv_select(s**2, UtY, self.ridge_grid, task.n, outside)
        y_mean = Y.mean(axis=0)
        coef = solve(P, Y - y_mean, ridge)
        return FittedRFRidge(feature_map=fmap, coef=coef, y_mean=y_mean, scaler=scaler, ridge=ridge)

    def to_dict(self):
        k = self.kernel.to_dict() if isinstance(self.kernel, KernelSpec) else self.kernel
        return {"kind": "rf_ridge", "num_features": self.num_features, "kernel": k,
                "ridge_grid": list(self.ridge_grid), "seed": self.seed}


# -- MLP -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedMLP:
    model: torch.nn.Module
    scaler: _Standardizer
    input_dim: int
    output_dim: int
    history: _mlp.TrainHistory

    def predict(self, Z):
        Zs = self.scaler(_check_dim(Z, self.input_dim))
        with torch.no_grad():
            out = self.model(torch.as_tensor(Zs, dtype=torch.float32))
        return out.numpy().astype(np.float64)

    def export_weights(self, path):
        _mlp.export_weights(self.model, path, extra={
            "input_mean": self.scaler.mean.tolist(), "input_std": self.scaler.std.tolist()})


@dataclass(frozen=True)
class MLPConfig:
    """Fully connected network trained with Adam on the square loss.

    Early stopping monitors the holdout loss; without a holdout the
    network trains for ``max_epochs``.
    """

    hidden_layers: tuple = (100, 100, 100)
    activation: str = "swish"
    learning_rate: float = 1e-3
    dropout: float = 0.2
    max_epochs: int = 300
    patience: int = 20
    batch_size: int = 128
    weight_decay: float = 0.0
    seed: int = 0
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if not self.hidden_layers:
            raise ValueError("hidden_layers must be nonempty")
        if self.activation not in _mlp.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def fit(self, task):
        if task.holdout_fraction > 0:
            tr, ho = task.split(self.seed)
        else:
            tr, ho = np.arange(task.n), None
        scaler = _Standardizer(task.inputs[tr])
        X = torch.as_tensor(scaler(task.inputs), dtype=torch.float32)
        Y = torch.as_tensor(task.targets, dtype=torch.float32)
        Xtr, Ytr = X[tr], Y[tr]
        with _mlp.seeded(self.seed):
            model = _mlp.build_mlp(X.shape[1], self.hidden_layers, Y.shape[1], self.activation,
                                   self.dropout)
            mse = torch.nn.functional.mse_loss
            val = None if ho is None else (lambda: mse(model(X[ho]), Y[ho]))
            hist = _mlp.train(
                model,
                batch_loss=lambda idx: mse(model(Xtr[idx]), Ytr[idx]),
                full_train_loss=lambda: mse(model(Xtr), Ytr),
                val_loss=val,
                n_train=len(tr),
                learning_rate=self.learning_rate,
                max_epochs=self.max_epochs,
                patience=self.patience,
                batch_size=self.batch_size,
                weight_decay=self.weight_decay,
                seed=self.seed,
            )
        return FittedMLP(model=model, scaler=scaler, input_dim=X.shape[1], output_dim=Y.shape[1],
                         history=hist)

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


_CONFIGS = {"krr": KRRConfig, "rf_ridge": RFRidgeConfig, "mlp": MLPConfig}


def oracle_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "krr")
    if kind not in _CONFIGS:
        raise ValueError(f"unknown oracle kind {kind!r}; choose from {sorted(_CONFIGS)}")
    if isinstance(d.get("kernel"), dict):
        d["kernel"] = KernelSpec.from_dict(d["kernel"])
    for key in ("ridge_grid", "hidden_layers"):
        if key in d:
            d[key] = tuple(d[key])
    return _CONFIGS[kind](**d)


def fit_oracle(config, task):
    """Fit ``config`` (any object exposing ``fit(task)``) on ``task``."""
    return config.fit(task)


def predict(regressor, Z):
    return regressor.predict(Z)
