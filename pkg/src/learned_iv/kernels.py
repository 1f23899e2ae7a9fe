"""Parametric kernels, Gram matrices, random Fourier features and GP prior draws."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist, pdist
from scipy.stats import qmc

from ._rng import child_rng

DEFAULT_NUM_RFF = 4096
_MEDIAN_PAIR_LIMIT = 2000
_MEDIAN_SUBSAMPLE_PAIRS = 2_000_000


class Family(str, enum.Enum):
    RBF = "rbf"
    MATERN32 = "matern32"
    MATERN52 = "matern52"
    LINEAR = "linear"

    @property
    def stationary(self):
        return self is not Family.LINEAR


# Student-t degrees of freedom (2 * nu) of the Matern spectral density.
_MATERN_DOF = {Family.MATERN32: 3.0, Family.MATERN52: 5.0}


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    return X


@dataclass(frozen=True)
class KernelSpec:
    """A stationary (or linear) kernel ``variance * r(|x - y| / bandwidth)``.

    ``bandwidth`` is ignored by the linear family, which evaluates
    ``variance * <x, y>``.
    """

    family: Family = Family.RBF
    bandwidth: float = 1.0
    variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ValueError(f"variance must be positive, got {self.variance}")

    def replace(self, **changes):
        fields = {"family": self.family, "bandwidth": self.bandwidth, "variance": self.variance}
        fields.update(changes)
        return KernelSpec(**fields)

    def to_dict(self):
        return {"family": self.family.value, "bandwidth": float(self.bandwidth),
                "variance": float(self.variance)}

    @classmethod
    def from_dict(cls, d):
        return cls(family=Family(str(d.get("family", "rbf")).lower()),
                   bandwidth=float(d.get("bandwidth", 1.0)),
                   variance=float(d.get("variance", 1.0)))

    def __call__(self, X, Y=None):
        return gram(self, X, X if Y is None else Y)


def _profile(family, r):
    """Correlation as a function of the scaled distance ``r = |x - y| / h``."""
    if family is Family.RBF:
        return np.exp(-0.5 * r**2)
    if family is Family.MATERN32:
        a = np.sqrt(3.0) * r
        return (1.0 + a) * np.exp(-a)
    if family is Family.MATERN52:
        a = np.sqrt(5.0) * r
        return (1.0 + a + a**2 / 3.0) * np.exp(-a)
    raise ValueError(f"no distance profile for {family}")


def eval_kernel(spec, x, y):
    """Kernel value between two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    return float(gram(spec, x[None, :], y[None, :])[0, 0])


def gram(spec, X, Y):
    """Gram matrix ``K[i, j] = k(X[i], Y[j])``; never jittered."""
    X = _as_2d(X)
    Y = _as_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]} columns")
    if spec.family is Family.LINEAR:
        return spec.variance * (X @ Y.T)
    if spec.family is Family.RBF:
        # Squared distances directly; avoids a sqrt/square round trip.
        D2 = cdist(X, Y, "sqeuclidean")
        return spec.variance * np.exp(-0.5 * D2 / spec.bandwidth**2)
    r = cdist(X, Y) / spec.bandwidth
    return spec.variance * _profile(spec.family, r)


def jitter_cholesky(A, rel_jitter=1e-8, max_escalations=3):
    """Lower Cholesky factor of ``A + jitter * I``.

    The jitter starts at ``rel_jitter * mean(diag(A))`` and is multiplied
    by 10 on each failure.
    """
    A = np.asarray(A, dtype=float)
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jitter = rel_jitter * scale
    for _ in range(max_escalations + 1):
        try:
            return np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    lam_min = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    raise np.linalg.LinAlgError(
        f"Cholesky failed after {max_escalations} jitter escalations "
        f"(final jitter {jitter / 10:.3g}, smallest eigenvalue {lam_min:.3g})"
    )


def median_heuristic(X, seed=0):
    """Median pairwise Euclidean distance between rows of ``X``.

    Above 2000 rows the median is taken over a seeded subsample of
    2e6 random pairs.
    """
    X = _as_2d(X)
    n = X.shape[0]
    if n < 2:
        raise ValueError("median_heuristic needs at least 2 points")
    if n <= _MEDIAN_PAIR_LIMIT:
        d = pdist(X)
    else:
        rng = child_rng(seed, 7)
        i = rng.integers(0, n, size=_MEDIAN_SUBSAMPLE_PAIRS)
        j = rng.integers(0, n - 1, size=_MEDIAN_SUBSAMPLE_PAIRS)
        j = j + (j >= i)  # distinct pairs
        d = np.linalg.norm(X[i] - X[j], axis=1)
    med = float(np.median(d))
    if not med > 0:
        raise ValueError("degenerate inputs: median pairwise distance is zero")
    return med


@dataclass(frozen=True, eq=False)
class FeatureMapRFF:
    """Random Fourier features ``phi(x) = scale * cos(W x + b)``.

    ``phi(x) @ phi(y)`` is an unbiased estimate of ``k(x, y)``.
    """

    frequencies: np.ndarray
    phases: np.ndarray
    scale: float
    source_spec: KernelSpec
    seed: int

    @property
    def num_features(self):
        return self.frequencies.shape[0]

    @property
    def input_dim(self):
        return self.frequencies.shape[1]

    def __call__(self, X):
        X = _as_2d(X)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"dimension mismatch: expected {self.input_dim} columns, got {X.shape[1]}")
        return self.scale * np.cos(X @ self.frequencies.T + self.phases)

    def project(self, X, weights, chunk_size=8192):
        """``phi(X) @ weights`` evaluated in row chunks to bound memory."""
        X = _as_2d(X)
        weights = np.asarray(weights, dtype=float)
        out_shape = (X.shape[0],) + weights.shape[1:]
        out = np.empty(out_shape)
        for start in range(0, X.shape[0], chunk_size):
            sl = slice(start, start + chunk_size)
            out[sl] = self(X[sl]) @ weights
        return out


def rff_feature_map(spec, num_features=DEFAULT_NUM_RFF, seed=0, input_dim=1):
    """Sample a random Fourier feature map for a stationary kernel.

    Frequencies and phases are taken from one scrambled Sobol sequence
    pushed through the spectral inverse CDF (Gaussian for RBF, Student-t
    for Matern). Sobol prefixes are nested, so a map with more features
    extends a smaller one drawn with the same seed.
    """
    if num_features < 1:
        raise ValueError("num_features must be >= 1")
    if spec.family is Family.LINEAR:
        raise ValueError("linear kernel has exact finite features; use the inputs directly instead of RFF")
    dof = _MATERN_DOF.get(spec.family)
    dim = input_dim + 1 + (dof is not None)
    sampler = qmc.Sobol(d=dim, scramble=True, seed=child_rng(seed, 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two sizes
        u = sampler.random(num_features)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    W = stats.norm.ppf(u[:, :input_dim])
    if dof is not None:
        W = W * np.sqrt(dof / stats.chi2.ppf(u[:, -1], dof))[:, None]
    W = W / spec.bandwidth
    b = 2.0 * np.pi * u[:, input_dim]
    scale = float(np.sqrt(2.0 * spec.variance / num_features))
    return FeatureMapRFF(frequencies=W, phases=b, scale=scale, source_spec=spec, seed=int(seed))


@dataclass(frozen=True, eq=False)
class GPSample:
    """One approximate prior draw ``f(x) = phi(x) @ weights``."""

    weights: np.ndarray
    feature_map: FeatureMapRFF

    def __call__(self, X):
        return self.feature_map.project(X, self.weights)


@dataclass(frozen=True, eq=False)
class GPSampleSet:
    """Several draws sharing one feature map; evaluates to an ``n x m`` matrix."""

    weights: np.ndarray  # num_features x m
    feature_map: FeatureMapRFF

    @property
    def m(self):
        return self.weights.shape[1]

    def __call__(self, X):
        return self.feature_map.project(X, self.weights)

    def __getitem__(self, j):
        return GPSample(self.weights[:, j].copy(), self.feature_map)


def draw_gp_sample(feature_map, seed):
    w = child_rng(seed, 11).standard_normal(feature_map.num_features)
    return GPSample(weights=w, feature_map=feature_map)


def draw_gp_samples(feature_map, m, seed):
    """``m`` prior draws on a shared feature map."""
    if m < 1:
        raise ValueError("m must be >= 1")
    W = child_rng(seed, 12).standard_normal((feature_map.num_features, m))
    return GPSampleSet(weights=W, feature_map=feature_map)
