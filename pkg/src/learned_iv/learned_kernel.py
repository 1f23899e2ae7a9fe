"""Learned instrument kernel built from denoised GP prior draws.

``m`` draws ``f_j ~ GP(0, k_x)`` are evaluated at the stage-1 treatments,
one vector-valued regression of those values on the stage-1 instruments
gives estimates of ``E[f_j(x) | z]``, and the clamped estimates (scaled by
``1/sqrt(m)``) plus a reduced-form estimate of ``E[y | z]`` form an
explicit feature map whose inner product is the instrument kernel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._rng import child_seed
from .kernels import DEFAULT_NUM_RFF, _as_2d, draw_gp_samples, rff_feature_map
from .oracle import MLPConfig, RegressionTask, fit_oracle

DEFAULT_CLAMP_CONSTANT = 5.0


def clamp_threshold(m, constant=DEFAULT_CLAMP_CONSTANT):
    return constant * math.log(max(m, 2))


def _clamp(values, tau):
    return np.clip(values, -tau, tau)


@dataclass(frozen=True, eq=False)
class LearnedFeatureMap:
    estimators: object  # fitted regressor with m outputs
    reduced_form: object | None
    threshold: float
    m: int
    input_dim: int
    treatment_draws: object = None
    reduced_form_source: str = "none"

    @property
    def num_features(self):
        return self.m + (self.reduced_form is not None)

    @property
    def column_names(self):
        names = [f"g{j + 1}" for j in range(self.m)]
        return names + ["h"] if self.reduced_form is not None else names

    def _check(self, Z):
        Z = _as_2d(Z)
        if Z.shape[1] != self.input_dim:
            raise ValueError(f"dimension mismatch: feature map expects {self.input_dim} columns, got {Z.shape[1]}")
        return Z

    def raw_estimates(self, Z):
        return np.asarray(self.estimators.predict(self._check(Z)), dtype=float)

    def feature_matrix(self, Z):
        Z = self._check(Z)
        G = _clamp(np.asarray(self.estimators.predict(Z), dtype=float), self.threshold) / math.sqrt(self.m)
        if self.reduced_form is None:
            return G
        h = _clamp(np.asarray(self.reduced_form.predict(Z), dtype=float).reshape(-1, 1), self.threshold)
        return np.hstack([G, h])

    def learned_gram(self, Z, Z2=None):
        P = self.feature_matrix(Z)
        return P @ (P if Z2 is None else self.feature_matrix(Z2)).T

    def reduced_form_predict(self, Z):
        if self.reduced_form is None:
            raise ValueError("feature map was built without a reduced-form feature")
        return _clamp(np.asarray(self.reduced_form.predict(self._check(Z)), dtype=float).ravel(),
                      self.threshold)

    def export_csv(self, path, Z):
        np.savetxt(path, self.feature_matrix(Z), delimiter=",", header=",".join(self.column_names),
                   comments="")


def _default_holdout(oracle):
    # The MLP needs a validation split for early stopping; kernel oracles use GCV.
    return 0.2 if isinstance(oracle, MLPConfig) else 0.0


def build_learned_feature_map(stage1, kx, m, oracle, seed=0, *, reduced_form_data=None,
                              include_reduced_form=True, clamp_constant=DEFAULT_CLAMP_CONSTANT,
                              num_rff=DEFAULT_NUM_RFF, holdout_fraction=None):
    """Run the first stage: draw, denoise and truncate ``m`` prior samples.

    Parameters
    ----------
    stage1 : tuple
        ``(z, x)`` or ``(z, x, y)`` stage-1 arrays. When ``y`` is present it
        trains the reduced-form feature.
    kx : KernelSpec
        Second-stage (treatment) kernel the prior draws come from.
    m : int
        Number of prior draws.
    oracle : object
        Oracle config with a ``fit(task)`` method.
    reduced_form_data : tuple, optional
        Fallback ``(z, y)`` used for the reduced form when stage 1 has no
        responses; the map records ``reduced_form_source="stage2"``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    z1, x1 = _as_2d(stage1[0]), _as_2d(stage1[1])
    y1 = stage1[2] if len(stage1) > 2 else None
    if z1.shape[0] == 0:
        raise ValueError("stage-1 data is empty")
    if z1.shape[0] != x1.shape[0]:
        raise ValueError("stage-1 z and x row counts differ")
    holdout = _default_holdout(oracle) if holdout_fraction is None else holdout_fraction

    fmap = rff_feature_map(kx, num_rff, seed=child_seed(seed, 1), input_dim=x1.shape[1])
    draws = draw_gp_samples(fmap, m, seed=child_seed(seed, 2))
    estimators = fit_oracle(oracle, RegressionTask(z1, draws(x1), holdout))

    reduced, source = None, "none"
    if include_reduced_form:
        if y1 is not None:
            rz, ry, source = z1, np.asarray(y1, dtype=float), "stage1"
        elif reduced_form_data is not None:
            warnings.warn("reduced form fitted on stage-2 responses; lambda estimate may be optimistic",
                          stacklevel=2)
            rz, ry, source = _as_2d(reduced_form_data[0]), np.asarray(reduced_form_data[1], dtype=float), "stage2"
        else:
            raise ValueError("reduced-form feature requested but no responses supplied")
        reduced = fit_oracle(oracle, RegressionTask(rz, ry.reshape(-1, 1), holdout))

    return LearnedFeatureMap(
        estimators=estimators,
        reduced_form=reduced,
        threshold=clamp_threshold(m, clamp_constant),
        m=m,
        input_dim=z1.shape[1],
        treatment_draws=draws,
        reduced_form_source=source,
    )


@dataclass(frozen=True, eq=False)
class FixedKernelFeatureMap:
    """Random-feature stand-in for a fixed-form instrument kernel (e.g. RBF).

    Inputs are standardised with the statistics passed at construction,
    so bandwidths refer to standardised instrument coordinates.
    """

    rff: object
    mean: np.ndarray
    std: np.ndarray
    reduced_form: object | None = None
    threshold: float = math.inf

    @property
    def input_dim(self):
        return self.rff.input_dim

    @property
    def num_features(self):
        return self.rff.num_features + (self.reduced_form is not None)

    def feature_matrix(self, Z):
        P = self.rff((_as_2d(Z) - self.mean) / self.std)
        if self.reduced_form is None:
            return P
        return np.hstack([P, self.reduced_form_predict(Z)[:, None]])

    def reduced_form_predict(self, Z):
        if self.reduced_form is None:
            raise ValueError("feature map was built without a reduced-form feature")
        return _clamp(np.asarray(self.reduced_form.predict(_as_2d(Z)), dtype=float).ravel(), self.threshold)

    def learned_gram(self, Z, Z2=None):
        P = self.feature_matrix(Z)
        return P @ (P if Z2 is None else self.feature_matrix(Z2)).T


def fixed_kernel_feature_map(kz, Z_ref, num_features=2048, seed=0, reduced_form=None, threshold=math.inf):
    """``reduced_form`` is an optional fitted regressor of ``y`` on ``z`` appended as one more column."""
    Z_ref = _as_2d(Z_ref)
    std = Z_ref.std(axis=0)
    return FixedKernelFeatureMap(
        rff=rff_feature_map(kz, num_features, seed=seed, input_dim=Z_ref.shape[1]),
        mean=Z_ref.mean(axis=0),
        std=np.where(std > 0, std, 1.0),
        reduced_form=reduced_form,
        threshold=threshold,
    )


def prior_coefficient_matrix(draws, X, m_prime):
    """Coefficients of prior draws on the top ``m_prime`` principal directions.

    The draws are ``f_j = phi @ w_j``. With ``phi(X) = U S V^T`` the
    principal directions of the empirical prior covariance are the
    columns of ``V``, and the coefficient of ``f_j`` on direction ``k``,
    normalised by its standard deviation, is ``w_j . v_k``. Returns the
    ``m x m_prime`` matrix of those coefficients.
    """
    P = draws.feature_map(X)
    if m_prime > min(P.shape):
        raise ValueError("m_prime exceeds the rank available on these points")
    _, _, Vt = np.linalg.svd(P, full_matrices=False)
    return draws.weights.T @ Vt[:m_prime].T
