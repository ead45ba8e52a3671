"""Exception hierarchy shared by every solver stage."""

from __future__ import annotations

import numpy as np


class CovSDDPError(Exception):
    """Base class for all package errors."""


class StructuralError(CovSDDPError, ValueError):
    """Array shapes or dimensions do not agree with the model."""


class ModelEvaluationError(CovSDDPError):
    """Drift or diffusion returned non-finite values."""

    def __init__(self, message: str, x=None, u=None):
        self.x = None if x is None else np.array(x, dtype=float)
        self.u = None if u is None else np.array(u, dtype=float)
        if x is not None:
            message = f"{message} at x={np.array2string(self.x)}, u={np.array2string(self.u)}"
        super().__init__(message)


class IntegrationBlowupError(CovSDDPError):
    """An Euler-Maruyama step produced a non-finite state."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (time index {step})"
        super().__init__(message)


class RolloutDivergenceError(IntegrationBlowupError):
    """Noise-free forward pass left the finite domain."""


class RegularizationError(CovSDDPError):
    """Quu could not be made positive definite."""

    def __init__(self, message: str, step: int, mu: float):
        self.step = step
        self.mu = mu
        super().__init__(f"{message} (step {step}, mu={mu:.3g})")


class EstimationError(CovSDDPError):
    """Too few (finite) samples to estimate moments."""


class ConfigError(CovSDDPError, ValueError):
    """Malformed run configuration."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        self.bare_message = message
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
