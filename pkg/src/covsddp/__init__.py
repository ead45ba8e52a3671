"""Covariance steering for nonlinear SDEs via stochastic DDP and dual ascent."""

from .costs import QuadraticCost
from .covcon import (
    CovControlOptions,
    CovControlResult,
    Multipliers,
    TerminalConstraint,
    project_pd,
    solve_covariance_control,
    update_multipliers,
)
from .dynamics import ControlledSDE, discretize_linearize, euler_maruyama_step, finite_diff_derivatives
from .errors import (
    ConfigError,
    CovSDDPError,
    EstimationError,
    IntegrationBlowupError,
    ModelEvaluationError,
    RegularizationError,
    RolloutDivergenceError,
    StructuralError,
)
from .rollout import (
    InitialCondition,
    MomentEstimate,
    estimate_moments,
    propagate_moments_gaussian,
    sample_closed_loop,
)
from .sddp import Policy, SDDPOptions, SDDPProblem, Trajectory, compiled_available, solve_sddp
from .systems import PRESETS, ProblemPreset, build_preset, preset_cosine1d, preset_linear_gaussian, preset_pendulum

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ControlledSDE",
    "CovControlOptions",
    "CovControlResult",
    "CovSDDPError",
    "EstimationError",
    "InitialCondition",
    "IntegrationBlowupError",
    "ModelEvaluationError",
    "MomentEstimate",
    "Multipliers",
    "PRESETS",
    "Policy",
    "ProblemPreset",
    "QuadraticCost",
    "RegularizationError",
    "RolloutDivergenceError",
    "SDDPOptions",
    "SDDPProblem",
    "StructuralError",
    "TerminalConstraint",
    "Trajectory",
    "build_preset",
    "compiled_available",
    "discretize_linearize",
    "estimate_moments",
    "euler_maruyama_step",
    "finite_diff_derivatives",
    "preset_cosine1d",
    "preset_linear_gaussian",
    "preset_pendulum",
    "project_pd",
    "propagate_moments_gaussian",
    "sample_closed_loop",
    "solve_covariance_control",
    "solve_sddp",
    "update_multipliers",
]
