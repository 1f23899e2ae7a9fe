"""Kernelized IV regression with a learned instrument kernel and quasi-Bayesian uncertainty."""

from .kernels import KernelSpec, draw_gp_samples, gram, median_heuristic, rff_feature_map
from .kiv import (
    KIVConfig,
    QuasiPosterior,
    bma_combine,
    credible_summaries,
    fit_quasi_posterior,
    solve_minimax_point_estimate,
)
from .learned_kernel import build_learned_feature_map, fixed_kernel_feature_map
from .oracle import KRRConfig, MLPConfig, RFRidgeConfig, fit_oracle
from .simgen import ScenarioConfig, generate

__version__ = "0.1.0"

__all__ = [
    "KernelSpec", "draw_gp_samples", "gram", "median_heuristic", "rff_feature_map",
    "KIVConfig", "QuasiPosterior", "bma_combine", "credible_summaries", "fit_quasi_posterior",
    "solve_minimax_point_estimate", "build_learned_feature_map", "fixed_kernel_feature_map",
    "KRRConfig", "MLPConfig", "RFRidgeConfig", "fit_oracle", "ScenarioConfig", "generate",
]
