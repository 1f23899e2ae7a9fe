"""Closed-form kernelized IV: quasi-posterior, minimax estimator, model averaging.

Notation: ``Phi`` is the ``n x r`` instrument feature matrix (so the
instrument Gram is ``Phi Phi^T``), ``K`` the treatment Gram and

    L      = Phi (Phi^T Phi + nu I)^{-1} Phi^T
    Lambda = (lam I + L K)^{-1} L.

The quasi-posterior of ``f(x*)`` is Gaussian with mean ``K_*x Lambda Y``
and covariance ``K_** - K_*x Lambda K_x*``.

Both matrices are handled through low-rank factors. With the eigenpairs
``(e, V)`` of the small core ``Phi^T Phi`` and ``U = Phi V e^{-1/2}``,
``L = B B^T`` where ``B = U diag(sqrt(e / (e + nu)))``, and
``Lambda = B (lam I + B^T K B)^{-1} B^T`` by the push-through identity.
Nothing of size ``n x n`` is ever inverted.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats
from scipy.special import logsumexp

from ._rng import child_rng
from .kernels import KernelSpec, _as_2d, gram, jitter_cholesky

EB_FLOOR = 1e-8
DEFAULT_NU_GRID = (0.01, 0.1, 1.0, 10.0)


# -- hyperparameters ---------------------------------------------------------

def empirical_bayes_lambda(Y, h_hat):
    """Mean squared reduced-form residual, floored at 1e-8."""
    Y = np.asarray(Y, dtype=float).ravel()
    h_hat = np.asarray(h_hat, dtype=float).ravel()
    if Y.shape != h_hat.shape:
        raise ValueError(f"length mismatch: {Y.size} responses vs {h_hat.size} fitted values")
    if Y.size < 1:
        raise ValueError("need at least one response")
    return max(float(np.mean((Y - h_hat) ** 2)), EB_FLOOR)


def feature_ridge_predict(Phi_tr, Y_tr, Phi_te, ridge):
    """Kernel ridge prediction with kernel ``Phi Phi^T``, computed in feature space.

    Targets are centred on their training mean, so an all-zero feature
    matrix predicts that mean.
    """
    Y_tr = np.asarray(Y_tr, dtype=float)
    mu = Y_tr.mean(axis=0)
    r = Phi_tr.shape[1]
    A = Phi_tr.T @ Phi_tr + ridge * np.eye(r)
    coef = scipy.linalg.solve(A, Phi_tr.T @ (Y_tr - mu), assume_a="pos")
    return Phi_te @ coef + mu


def feature_ridge_heldout_mse(Phi, Y, ridge, seed, train_idx=None, test_idx=None):
    if train_idx is None:
        train_idx, test_idx = half_split(Phi.shape[0], seed)
    pred = feature_ridge_predict(Phi[train_idx], Y[train_idx], Phi[test_idx], ridge)
    return float(np.mean((pred - Y[test_idx]) ** 2))


def half_split(n, seed):
    if n < 4:
        raise ValueError(f"need at least 4 rows for a 50/50 split, got {n}")
    perm = child_rng(seed, 31).permutation(n)
    return np.sort(perm[: n // 2]), np.sort(perm[n // 2:])


def select_nu(Phi, Y, grid=DEFAULT_NU_GRID, seed=0):
    """Pick ``nu = c * n`` from ``grid`` by held-out reduced-form error.

    The candidate ridge on the half-sized training split is ``c`` times
    that split's size, so the per-sample penalty matches the final fit.
    """
    n = Phi.shape[0]
    tr, te = half_split(n, seed)
    Y = np.asarray(Y, dtype=float).reshape(n, -1)
    errs = [feature_ridge_heldout_mse(Phi, Y, c * len(tr), seed, tr, te) for c in grid]
    return float(grid[int(np.argmin(errs))] * n)


@dataclass(frozen=True)
class KIVConfig:
    """Second-stage settings.

    ``lam`` may be ``"empirical-bayes"`` and ``nu`` ``"validation-grid"``;
    in the latter case ``nu = c * n2`` for the ``c`` in ``nu_grid`` with
    the smallest held-out reduced-form error.
    """

    lam: object = "empirical-bayes"
    nu: object = "validation-grid"
    nu_grid: tuple = DEFAULT_NU_GRID
    kappa: float = 1.0
    mu: float | None = None
    jitter: float = 1e-8
    second_stage: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        if self.lam != "empirical-bayes" and not (float(self.lam) > 0):
            raise ValueError("lam must be positive or 'empirical-bayes'")
        if self.nu != "validation-grid" and not (float(self.nu) >= 0):
            raise ValueError("nu must be nonnegative or 'validation-grid'")
        if not self.nu_grid or any(c <= 0 for c in self.nu_grid):
            raise ValueError("nu_grid must be nonempty and positive")
        if self.kappa < 0 or (self.mu is not None and self.mu <= 0) or self.jitter <= 0:
            raise ValueError("kappa must be >= 0, mu and jitter > 0")
        object.__setattr__(self, "nu_grid", tuple(float(c) for c in self.nu_grid))

    def to_dict(self):
        return {"lam": self.lam, "nu": self.nu, "nu_grid": list(self.nu_grid), "kappa": self.kappa,
                "mu": self.mu, "jitter": self.jitter, "second_stage": self.second_stage.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "second_stage" in d:
            d["second_stage"] = KernelSpec.from_dict(d["second_stage"])
        if "nu_grid" in d:
            d["nu_grid"] = tuple(d["nu_grid"])
        return cls(**d)


# -- low-rank algebra --------------------------------------------------------

def woodbury_factors(Phi, nu, tol=1e-12):
    """Orthonormal ``U`` and weights ``d`` with ``L = U diag(d) U^T``.

    Uses only the ``r x r`` core ``Phi^T Phi``. Raises if the core has an
    eigenvalue below ``-1e-8`` (relative), i.e. is not PSD.
    """
    Phi = np.asarray(Phi, dtype=float)
    e, V = np.linalg.eigh(Phi.T @ Phi)
    scale = max(float(e.max(initial=0.0)), 1e-300)
    if e.min(initial=0.0) < -1e-8 * scale:
        raise np.linalg.LinAlgError(f"feature core not PSD: smallest eigenvalue {e.min():.3g}")
    keep = e > tol * scale
    e, V = e[keep], V[:, keep]
    U = (Phi @ V) / np.sqrt(e)
    return U, e / (e + nu)


def woodbury_L(Phi, nu):
    U, d = woodbury_factors(Phi, nu)
    return (U * d) @ U.T


def naive_L(Kzz, nu):
    """Dense ``(Kzz + nu I)^{-1} Kzz``; O(n^3), for cross-checks."""
    n = Kzz.shape[0]
    return np.linalg.solve(Kzz + nu * np.eye(n), Kzz)


def dense_lambda(L, K, lam, max_asymmetry=1e-6):
    """Solve ``(lam I + L K) Lambda = L`` densely, then symmetrise."""
    n = L.shape[0]
    A = lam * np.eye(n) + L @ K
    try:
        Lam = np.linalg.solve(A, L)
    except np.linalg.LinAlgError as err:
        smallest = np.min(np.abs(np.linalg.eigvals(A)))
        raise np.linalg.LinAlgError(f"(lam I + L K) is singular; smallest |eigenvalue| {smallest:.3g}") from err
    asym = np.max(np.abs(Lam - Lam.T)) / max(np.max(np.abs(Lam)), 1e-300)
    if asym > max_asymmetry:
        raise np.linalg.LinAlgError(f"Lambda asymmetry {asym:.3g} exceeds {max_asymmetry}")
    return 0.5 * (Lam + Lam.T)


# -- quasi-posterior ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuasiPosterior:
    X_train: np.ndarray
    Y: np.ndarray
    U: np.ndarray  # orthonormal basis of range(L)
    d: np.ndarray  # eigenvalues of L on that basis
    spec: KernelSpec
    lam: float
    nu: float
    jitter: float
    K_xx: np.ndarray = field(repr=False)
    _chol: np.ndarray = field(repr=False)  # Cholesky of lam I + B^T K B
    _coef: np.ndarray = field(repr=False)  # Lambda Y

    @property
    def B(self):
        return self.U * np.sqrt(self.d)

    @property
    def rank(self):
        return self.d.size

    @property
    def L(self):
        return (self.U * self.d) @ self.U.T

    @property
    def Lambda(self):
        W = scipy.linalg.solve_triangular(self._chol, self.B.T, lower=True)
        return W.T @ W

    def _kstar(self, Xs):
        Xs = _as_2d(Xs)
        if Xs.shape[1] != self.X_train.shape[1]:
            raise ValueError(f"dimension mismatch: posterior expects {self.X_train.shape[1]} columns")
        return Xs, gram(self.spec, Xs, self.X_train)

    def mean(self, Xs):
        _, Ks = self._kstar(Xs)
        return Ks @ self._coef

    def cov(self, Xs):
        Xs, Ks = self._kstar(Xs)
        A = scipy.linalg.solve_triangular(self._chol, self.B.T @ Ks.T, lower=True)
        C = gram(self.spec, Xs, Xs) - A.T @ A
        return 0.5 * (C + C.T)

    def sample(self, Xs, n_samples, seed=0):
        return sample_gaussian(self.mean(Xs), self.cov(Xs), n_samples, seed, self.jitter)

    def log_marginal_quasi_likelihood(self):
        # log|lam^-1 (L^1/2 K L^1/2 + lam I)| = log|I + B^T K B / lam|
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol))) - self.rank * np.log(self.lam)
        return float(-0.5 * (self.Y @ self._coef + logdet))

    def credible_summaries(self, Xs, level=0.9, n_samples=2000, seed=0):
        mean, cov = self.mean(Xs), self.cov(Xs)
        samples = sample_gaussian(mean, cov, n_samples, seed, self.jitter)
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        zq = stats.norm.ppf(0.5 + level / 2.0)
        return CredibleSummary(mean=mean, sd=sd, ci_lower=mean - zq * sd, ci_upper=mean + zq * sd,
                               ball_radius=_ball_radius(samples, mean, level), level=level)


def posterior_from_features(Phi, X, Y, spec, lam, nu, jitter=1e-8):
    """Fit the quasi-posterior given an explicit instrument feature matrix."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    Phi = np.asarray(Phi, dtype=float)
    if not (Phi.shape[0] == X.shape[0] == Y.size):
        raise ValueError("Phi, X and Y must have the same number of rows")
    if not lam > 0:
        raise ValueError("lam must be positive")
    U, d = woodbury_factors(Phi, nu)
    K = gram(spec, X, X)
    B = U * np.sqrt(d)
    M = lam * np.eye(d.size) + B.T @ K @ B
    M = 0.5 * (M + M.T)
    try:
        C = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        try:
            C = jitter_cholesky(M, jitter)
        except np.linalg.LinAlgError as err:
            smallest = np.linalg.eigvalsh(M)[0]
            raise np.linalg.LinAlgError(
                f"(lam I + L K) singular after jitter; smallest eigenvalue {smallest:.3g}") from err
    W = scipy.linalg.cho_solve((C, True), B.T @ Y)
    return QuasiPosterior(X_train=X, Y=Y, U=U, d=d, spec=spec, lam=float(lam), nu=float(nu),
                          jitter=jitter, K_xx=K, _chol=C, _coef=B @ W)


def resolve_hyperparameters(feature_map, Z, Y, config, seed=0):
    """Concrete ``(lam, nu)`` from a config that may name selection policies."""
    Phi = feature_map.feature_matrix(Z)
    Y = np.asarray(Y, dtype=float).ravel()
    if config.lam == "empirical-bayes":
        lam = empirical_bayes_lambda(Y, feature_map.reduced_form_predict(Z))
    else:
        lam = float(config.lam)
    nu = select_nu(Phi, Y, config.nu_grid, seed) if config.nu == "validation-grid" else float(config.nu)
    return lam, nu


def fit_quasi_posterior(stage2, feature_map, config, seed=0, spec=None, lam=None, nu=None):
    """Quasi-posterior on stage-2 data ``(Z, X, Y)`` with a learned feature map.

    ``lam``/``nu`` override the config when given (used to share one
    selection across several second-stage kernels).
    """
    Z, X, Y = stage2
    if len(Y) < 2:
        raise ValueError("need at least 2 stage-2 rows")
    if lam is None or nu is None:
        lam_c, nu_c = resolve_hyperparameters(feature_map, Z, Y, config, seed)
        lam = lam_c if lam is None else lam
        nu = nu_c if nu is None else nu
    Phi = feature_map.feature_matrix(Z)
    return posterior_from_features(Phi, X, Y, spec or config.second_stage, lam, nu, config.jitter)


def posterior_mean(post, Xs):
    return post.mean(Xs)


def posterior_cov(post, Xs):
    return post.cov(Xs)


def sample_posterior(post, Xs, n_samples, seed=0):
    return post.sample(Xs, n_samples, seed)


def log_marginal_quasi_likelihood(post):
    return post.log_marginal_quasi_likelihood()


def sample_gaussian(mean, cov, n_samples, seed=0, jitter=1e-8):
    """Rows ``mean + C z`` with ``C`` the jittered Cholesky factor of ``cov``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mean = np.asarray(mean, dtype=float)
    rng = child_rng(seed, 41)
    if not np.any(cov):
        return np.tile(mean, (n_samples, 1))
    C = jitter_cholesky(cov, jitter, max_escalations=3)
    return mean + rng.standard_normal((n_samples, mean.size)) @ C.T


# -- credible summaries ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CredibleSummary:
    mean: np.ndarray
    sd: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    ball_radius: float
    level: float

    def export_csv(self, path, Xs):
        Xs = _as_2d(Xs)
        xcols = ["x*"] if Xs.shape[1] == 1 else [f"x*_{k + 1}" for k in range(Xs.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(xcols + ["mean", "sd", "ci_lo", "ci_hi"])
            for i in range(Xs.shape[0]):
                w.writerow([repr(float(v)) for v in Xs[i]] + [repr(float(v)) for v in (
                    self.mean[i], self.sd[i], self.ci_lower[i], self.ci_upper[i])])


def _rms(A, axis=-1):
    return np.sqrt(np.mean(A**2, axis=axis))


def _ball_radius(samples, center, level):
    return float(np.quantile(_rms(samples - center), level))


def credible_summaries(post, Xs, level=0.9, n_samples=2000, seed=0):
    """L2 credible-ball radius (RMS norm over ``Xs``) and pointwise intervals."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return post.credible_summaries(Xs, level, n_samples, seed)


# -- minimax point estimator -------------------------------------------------

def _inner_system(Phi, kappa, lambda_g):
    n, r = Phi.shape
    return (kappa / n) * (Phi.T @ Phi) + lambda_g * np.eye(r)


def inner_best_response(Phi, resid, kappa, lambda_g):
    """Maximising ``beta`` of the inner problem for residuals ``y - f(x)``."""
    n = Phi.shape[0]
    return 0.5 * np.linalg.solve(_inner_system(Phi, kappa, lambda_g), Phi.T @ resid / n)


def minimax_objective(alpha, beta, Phi, K, Y, kappa, lambda_g, mu):
    """Game value for ``f = sum_i alpha_i k(x_i, .)`` and ``g = Phi beta``."""
    g = Phi @ beta
    return float(np.mean((Y - K @ alpha - kappa * g) * g) - lambda_g * beta @ beta
                 + mu * alpha @ K @ alpha)


def saddle_value(alpha, Phi, K, Y, kappa, lambda_g, mu):
    beta = inner_best_response(Phi, Y - K @ alpha, kappa, lambda_g)
    return minimax_objective(alpha, beta, Phi, K, Y, kappa, lambda_g, mu)


def minimax_alpha(Phi, K, Y, kappa, lambda_g, mu):
    """Representer coefficients of the minimax estimator.

    Eliminating the inner maximisation gives the outer objective
    ``(Y - K a)^T P (Y - K a) / (4 n^2) + mu a^T K a`` with
    ``P = Phi A^{-1} Phi^T`` and ``A = (kappa/n) Phi^T Phi + lambda_g I``;
    its stationarity condition is ``(P K + 4 n^2 mu I) a = P Y``.
    """
    if kappa < 0 or not lambda_g > 0 or not mu > 0:
        raise ValueError("need kappa >= 0, lambda_g > 0, mu > 0")
    Y = np.asarray(Y, dtype=float).ravel()
    n = Phi.shape[0]
    P = Phi @ np.linalg.solve(_inner_system(Phi, kappa, lambda_g), Phi.T)
    P = 0.5 * (P + P.T)
    try:
        return np.linalg.solve(P @ K + 4.0 * n**2 * mu * np.eye(n), P @ Y)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("minimax outer system is singular") from err


def solve_minimax_point_estimate(stage2, feature_map, kx, kappa, lambda_g, mu):
    Z, X, Y = stage2
    Phi = feature_map.feature_matrix(Z)
    return minimax_alpha(Phi, gram(kx, X, X), Y, kappa, lambda_g, mu)


def quasi_bayes_correspondence(n, lam, nu, kappa=1.0):
    """Minimax regularisers whose estimator equals the quasi-posterior mean.

    For any ``kappa > 0``: ``lambda_g = kappa * nu / n`` and
    ``mu = lam / (4 n kappa)``.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return kappa, kappa * nu / n, lam / (4.0 * n * kappa)


# -- model averaging ---------------------------------------------------------

def bma_log_prior(sigma, h, sigma_shape=2.0, sigma_scale=2.0, h_shape=2.0, h_rate=1.0):
    """Log density of InvGamma(2, 2) on the output scale and Gamma(2, 1) on the bandwidth."""
    return float(stats.invgamma.logpdf(sigma, sigma_shape, scale=sigma_scale)
                 + stats.gamma.logpdf(h, h_shape, scale=1.0 / h_rate))


def _largest_remainder(weights, total):
    raw = np.asarray(weights) * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


@dataclass(frozen=True, eq=False)
class BMAResult:
    posteriors: list
    weights: np.ndarray
    log_ml: np.ndarray
    log_prior: np.ndarray
    labels: list = field(default_factory=list)

    def mean(self, Xs):
        return sum(w * p.mean(Xs) for w, p in zip(self.weights, self.posteriors) if w > 0)

    mixture_mean = mean

    def sample(self, Xs, n_samples, seed=0):
        counts = _largest_remainder(self.weights, n_samples)
        parts = [p.sample(Xs, c, seed=seed + 7919 * j) for j, (p, c) in enumerate(zip(self.posteriors, counts))
                 if c > 0]
        return np.vstack(parts)

    def mixture_quantiles(self, Xs, quantiles, n_samples=4000, seed=0):
        return np.quantile(self.sample(Xs, n_samples, seed), quantiles, axis=0)

    def credible_summaries(self, Xs, level=0.9, n_samples=4000, seed=0):
        samples = self.sample(Xs, n_samples, seed)
        mean = self.mean(Xs)
        lo, hi = np.quantile(samples, [0.5 - level / 2, 0.5 + level / 2], axis=0)
        return CredibleSummary(mean=mean, sd=samples.std(axis=0), ci_lower=lo, ci_upper=hi,
                               ball_radius=_ball_radius(samples, mean, level), level=level)

    def log_marginal_quasi_likelihood(self):
        """Log evidence of the mixture: logsumexp(log_ml + log_prior) with normalised prior."""
        return float(logsumexp(self.log_ml + self.log_prior - logsumexp(self.log_prior)))

    def weight_records(self):
        out = []
        for lab, lml, w in zip(self.labels, self.log_ml, self.weights):
            out.append({**lab, "log_ml": float(lml), "weight": float(w)})
        return out

    def export_weights(self, path):
        with open(path, "w") as fh:
            json.dump(self.weight_records(), fh, indent=2)


def bma_weights(log_ml, log_prior):
    logits = np.asarray(log_ml, dtype=float) + np.asarray(log_prior, dtype=float)
    return np.exp(logits - logsumexp(logits))


def bma_combine(candidates, labels=None):
    """Weights proportional to ``exp(log_ml + log_prior)`` over fitted posteriors.

    ``candidates`` is a list of ``(posterior, log_prior)`` pairs.
    """
    if not candidates:
        raise ValueError("bma_combine needs at least one candidate")
    posts = [c[0] for c in candidates]
    log_prior = np.array([float(c[1]) for c in candidates])
    log_ml = np.array([p.log_marginal_quasi_likelihood() for p in posts])
    return BMAResult(posteriors=posts, weights=bma_weights(log_ml, log_prior), log_ml=log_ml, log_prior=log_prior,
                     labels=labels or [{} for _ in posts])
