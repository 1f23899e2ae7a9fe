"""First-stage validation statistic and second-stage kernel selection."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._rng import child_seed
from .kernels import DEFAULT_NUM_RFF, KernelSpec, _as_2d, draw_gp_samples, median_heuristic, rff_feature_map
from .kiv import DEFAULT_NU_GRID, KIVConfig, fit_quasi_posterior, half_split, feature_ridge_predict, \
    resolve_hyperparameters, select_nu

DEFAULT_M_V = 10


@dataclass(frozen=True)
class ValidationReport:
    task_generalization_mse: float
    reduced_form_mse: float
    total: float
    m_v: int
    seed: int
    nu: float = float("nan")

    def to_row(self, **labels):
        return {**labels, **asdict(self)}


def write_reports(path, rows):
    """One CSV row per report; ``rows`` are dicts from ``ValidationReport.to_row``."""
    rows = list(rows)
    if not rows:
        raise ValueError("no reports to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def validation_draws(kx, m_v, seed, input_dim=1, num_rff=DEFAULT_NUM_RFF):
    """The fresh prior draws used by :func:`first_stage_validation` for ``seed``."""
    fmap = rff_feature_map(kx, num_rff, seed=child_seed(seed, 21), input_dim=input_dim)
    return draw_gp_samples(fmap, m_v, seed=child_seed(seed, 22))


def first_stage_validation(feature_map, stage2, kx, m_v=DEFAULT_M_V, seed=0, nu=None, nu_grid=DEFAULT_NU_GRID,
                           num_rff=DEFAULT_NUM_RFF):
    """Held-out error of ridge regression with the learned instrument kernel.

    Averages the error over ``m_v`` fresh prior draws evaluated at the
    stage-2 treatments (targets ``f_v(x_i)`` regressed on ``z_i``) and adds
    the error of predicting ``y`` from ``z``. Every term uses the same
    seeded 50/50 split and one ridge ``nu``, selected on ``(z, y)`` by the
    estimator's grid policy unless given.

    Parameters
    ----------
    feature_map
        Anything with ``feature_matrix(Z)`` (learned or fixed-form).
    stage2 : tuple
        ``(Z, X, Y)`` stage-2 arrays.
    """
    if m_v < 1:
        raise ValueError("m_v must be >= 1")
    Z, X, Y = stage2
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if len(Y) < 8:
        raise ValueError(f"first-stage validation needs at least 8 stage-2 rows, got {len(Y)}")
    Phi = feature_map.feature_matrix(Z)
    tr, te = half_split(len(Y), seed)
    if nu is None:
        nu = select_nu(Phi, Y, nu_grid, seed)
    ridge = nu * len(tr) / len(Y)

    T = validation_draws(kx, m_v, seed, X.shape[1], num_rff)(X)

    def heldout(targets):
        pred = feature_ridge_predict(Phi[tr], targets[tr], Phi[te], ridge)
        return float(np.mean((pred - targets[te]) ** 2))

    task = heldout(T)  # mean over draws of each draw's held-out MSE
    reduced = heldout(Y[:, None])
    return ValidationReport(task, reduced, task + reduced, int(m_v), int(seed), float(nu))


def bandwidth_candidates(X, multipliers=(0.5, 1.0, 1.5), variance=1.0, family="rbf"):
    """Kernels with bandwidths ``c * median distance`` of the treatments."""
    med = median_heuristic(X)
    return [KernelSpec(family, c * med, variance) for c in multipliers]


def select_second_stage(candidates, stage2, feature_map, config=None, seed=0, lam=None, nu=None):
    """Fit one quasi-posterior per candidate kernel and keep the best log-ML.

    ``lam`` and ``nu`` are resolved once (from ``config`` unless given) and
    shared by all candidates. Ties go to the smaller bandwidth, then to
    list order.

    Returns
    -------
    best : KernelSpec
    table : list of (KernelSpec, float)
        Log-ML per candidate in input order; ``nan`` where the fit failed.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("select_second_stage needs at least one candidate")
    config = config or KIVConfig()
    Z, _, Y = stage2
    if lam is None or nu is None:
        lam_c, nu_c = resolve_hyperparameters(feature_map, Z, Y, config, seed)
        lam = lam_c if lam is None else lam
        nu = nu_c if nu is None else nu
    table, failures = [], []
    for spec in candidates:
        try:
            post = fit_quasi_posterior(stage2, feature_map, config, seed, spec=spec, lam=lam, nu=nu)
            table.append((spec, post.log_marginal_quasi_likelihood()))
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as err:
            failures.append(f"{spec}: {err}")
            table.append((spec, math.nan))
    ok = [i for i, (_, v) in enumerate(table) if math.isfinite(v)]
    if not ok:
        raise RuntimeError("all second-stage fits failed:\n" + "\n".join(failures))
    best = min(ok, key=lambda i: (-table[i][1], table[i][0].bandwidth, i))
    return table[best][0], table
