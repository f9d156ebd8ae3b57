"""Simulation laboratory for interacting-particle SDE systems.

Nonlinear (distribution-dependent) dynamics with possibly singular pairwise
interactions, reflection couplings with explicit concave rate profiles,
sandwich estimators for dual distances, fixed-point iteration on the frozen
map, and end-to-end decay-rate experiments behind a deterministic CLI.
"""

__version__ = "0.1.0"

from ._backend import active_backend, have_numba, set_backend
from .coupling import (CoupledTrajectories, PhiParams, PsiConstructionError,
                       PsiProfile, build_psi, default_delta_couple,
                       dissipativity_c2, mirror_matrix, phi,
                       phi_antiderivative, phi_root, psi_residuals,
                       reflection_coupled_pair, split_noise,
                       theoretical_rate, write_psi_csv)
from .experiments import (RateReport, fit_rate, log_spaced_snapshots,
                          run_entropy_decay, run_ergodicity,
                          two_flow_noise_floor)
from .fixed_point import (PicardSettings, PicardTrace, approx_phi,
                          measure_noise_floor, picard_iterate,
                          rate_constants)
from .metrics import (CombinedResult, DistanceSeries, EstimatorError,
                      GaussianRef, KStarEstimate, WassersteinResult,
                      combined_w, gaussian_w2, kstar_distance,
                      relative_entropy, silverman_bandwidth, wasserstein_p)
from .model import (DiffusionField, DriftField, EmpiricalMeasure, Field,
                    InitLaw, InteractionKernel, ScenarioConfig,
                    ValidationError, eval_kernel, interaction_drift,
                    kernel_eta, localized_lk_norm, mean_field_drift)
from .sde_engine import (EngineError, MeasureMode, ParticleEnsemble,
                         em_step, load_snapshots_binary, load_snapshots_csv,
                         sample_init, save_snapshots_binary,
                         save_snapshots_csv, simulate, step_noise)

__all__ = [
    "__version__",
    "active_backend", "have_numba", "set_backend",
    "CoupledTrajectories", "PhiParams", "PsiConstructionError", "PsiProfile",
    "build_psi", "default_delta_couple", "dissipativity_c2", "mirror_matrix",
    "phi", "phi_antiderivative", "phi_root", "psi_residuals",
    "reflection_coupled_pair", "split_noise", "theoretical_rate",
    "write_psi_csv",
    "RateReport", "fit_rate", "log_spaced_snapshots", "run_entropy_decay",
    "run_ergodicity", "two_flow_noise_floor",
    "PicardSettings", "PicardTrace", "approx_phi", "measure_noise_floor",
    "picard_iterate", "rate_constants",
    "CombinedResult", "DistanceSeries", "EstimatorError", "GaussianRef",
    "KStarEstimate", "WassersteinResult", "combined_w", "gaussian_w2",
    "kstar_distance", "relative_entropy", "silverman_bandwidth",
    "wasserstein_p",
    "DiffusionField", "DriftField", "EmpiricalMeasure", "Field", "InitLaw",
    "InteractionKernel", "ScenarioConfig", "ValidationError", "eval_kernel",
    "interaction_drift", "kernel_eta", "localized_lk_norm",
    "mean_field_drift",
    "EngineError", "MeasureMode", "ParticleEnsemble", "em_step",
    "load_snapshots_binary", "load_snapshots_csv", "sample_init",
    "save_snapshots_binary", "save_snapshots_csv", "simulate", "step_noise",
]
