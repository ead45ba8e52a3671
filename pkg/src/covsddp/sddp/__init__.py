"""Stochastic DDP inner solver for a fixed terminal cost."""

from .expansion import (
    NoiseCorrections,
    QExpansion,
    ValueExpansion,
    noise_corrections,
    q_expansion,
    value_update,
)
from .kernels import compiled_available, get_backend, resolve_backend
from .solver import (
    BackwardPassResult,
    Policy,
    SDDPDiagnostics,
    SDDPOptions,
    SDDPProblem,
    Trajectory,
    backward_pass,
    forward_pass,
    linearize_trajectory,
    noise_penalty,
    rollout_nominal,
    solve_sddp,
)

__all__ = [
    "BackwardPassResult",
    "NoiseCorrections",
    "Policy",
    "QExpansion",
    "SDDPDiagnostics",
    "SDDPOptions",
    "SDDPProblem",
    "Trajectory",
    "ValueExpansion",
    "backward_pass",
    "compiled_available",
    "forward_pass",
    "get_backend",
    "resolve_backend",
    "linearize_trajectory",
    "noise_corrections",
    "noise_penalty",
    "q_expansion",
    "rollout_nominal",
    "solve_sddp",
    "value_update",
]
