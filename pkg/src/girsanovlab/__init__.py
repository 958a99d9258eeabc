"""Midpoint Langevin discretizations with anticipating-Girsanov path weights.

The package simulates midpoint discretizations of overdamped and underdamped
Langevin dynamics, computes their pathwise change-of-measure weights against
the continuous diffusion through finite-dimensional Malliavin calculus
(derivative blocks, Skorohod adjoint, Carleman–Fredholm determinant), and
estimates KL and Rényi divergences between the algorithm and diffusion path
laws.  A config-driven CLI wires these pieces into deterministic experiments
and a twelve-point acceptance suite.
"""

from .acceptance import (
    DEFAULT_SEED,
    AcceptanceSuite,
    CriterionResult,
    run_acceptance,
)
from .affine import (
    quadratic_path_kl,
    scheme_marginal_gaussian,
    step_maps_for_schedule,
)
from .config import ConfigError, ExperimentConfig, load_config, load_config_file
from .divergences import (
    DivergenceEstimate,
    LocalErrorReport,
    SlopeFit,
    diffusion_marginal_ld,
    diffusion_marginal_uld,
    estimate_kl,
    estimate_renyi,
    fit_loglog_slope,
    gaussian_kl,
    local_error_sweep,
    pinsker_tv_bound,
    stationary_moments,
)
from .engine import GRAD_QUERIES_PER_STEP, WeightRun, generic_log_weights, run_weights
from .experiments import Check, RunResult, run, run_experiment
from .girsanov import (
    DriftRealization,
    LogWeight,
    MalliavinBlocks,
    TraceDiagnostics,
    carleman_fredholm_logdet,
    drift_dmulmc,
    drift_mlmc,
    drift_ulmc,
    malliavin_blocks_dmulmc,
    malliavin_blocks_mlmc,
    malliavin_blocks_ulmc,
    rn_log_weight,
    skorohod_adjoint,
    spectral_radius_estimate,
    trace_diagnostics_mlmc,
)
from .integrators import (
    OverdampedTrajectory,
    UnderdampedTrajectory,
    exact_ou_flow_ld,
    exact_ou_flow_uld,
    simulate_dmulmc,
    simulate_mlmc,
    simulate_ulmc,
)
from .paths import (
    NoisePath,
    OverdampedSchedule,
    TimeGrid,
    UnderdampedSchedule,
    noise_matrix,
    refine_noise,
)
from .potentials import (
    AnisotropicQuadratic,
    IsotropicQuadratic,
    LogCoshProduct,
    PerturbedQuadratic,
    Potential,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SEED",
    "AcceptanceSuite",
    "AnisotropicQuadratic",
    "Check",
    "ConfigError",
    "CriterionResult",
    "DivergenceEstimate",
    "DriftRealization",
    "ExperimentConfig",
    "GRAD_QUERIES_PER_STEP",
    "IsotropicQuadratic",
    "LocalErrorReport",
    "LogCoshProduct",
    "LogWeight",
    "MalliavinBlocks",
    "NoisePath",
    "OverdampedSchedule",
    "OverdampedTrajectory",
    "PerturbedQuadratic",
    "Potential",
    "RunResult",
    "SlopeFit",
    "TimeGrid",
    "TraceDiagnostics",
    "UnderdampedSchedule",
    "UnderdampedTrajectory",
    "WeightRun",
    "carleman_fredholm_logdet",
    "diffusion_marginal_ld",
    "diffusion_marginal_uld",
    "drift_dmulmc",
    "drift_mlmc",
    "drift_ulmc",
    "estimate_kl",
    "estimate_renyi",
    "exact_ou_flow_ld",
    "exact_ou_flow_uld",
    "fit_loglog_slope",
    "gaussian_kl",
    "generic_log_weights",
    "load_config",
    "load_config_file",
    "local_error_sweep",
    "malliavin_blocks_dmulmc",
    "malliavin_blocks_mlmc",
    "malliavin_blocks_ulmc",
    "noise_matrix",
    "pinsker_tv_bound",
    "quadratic_path_kl",
    "refine_noise",
    "rn_log_weight",
    "run",
    "run_acceptance",
    "run_experiment",
    "run_weights",
    "scheme_marginal_gaussian",
    "simulate_dmulmc",
    "simulate_mlmc",
    "simulate_ulmc",
    "skorohod_adjoint",
    "spectral_radius_estimate",
    "stationary_moments",
    "step_maps_for_schedule",
    "trace_diagnostics_mlmc",
    "__version__",
]
