"""Quadratic running cost rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


class CostDerivatives(NamedTuple):
    """Cost value and derivatives over one step (already multiplied by dt)."""

    l: np.ndarray
    lx: np.ndarray
    lu: np.ndarray
    lxx: np.ndarray
    luu: np.ndarray
    lux: np.ndarray


@dataclass(frozen=True)
class QuadraticCost:
    r"""Cost rate :math:`\tfrac12 (x-x_r)^T Q (x-x_r) + \tfrac12 (u-u_r)^T R (u-u_r)`.

    Note the one-half: a rate written as ``r u**2`` is ``R = 2 r``.
    """

    Q: np.ndarray
    R: np.ndarray
    x_ref: Optional[np.ndarray] = None
    u_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "R", 0.5 * (R + R.T))
        n, m = Q.shape[0], R.shape[0]
        xr = np.zeros(n) if self.x_ref is None else np.asarray(self.x_ref, dtype=float).reshape(n)
        ur = np.zeros(m) if self.u_ref is None else np.asarray(self.u_ref, dtype=float).reshape(m)
        object.__setattr__(self, "x_ref", xr)
        object.__setattr__(self, "u_ref", ur)

    @classmethod
    def control_only(cls, n: int, R) -> "QuadraticCost":
        R = np.atleast_2d(np.asarray(R, dtype=float))
        return cls(np.zeros((n, n)), R)

    @property
    def state_dim(self) -> int:
        return self.Q.shape[0]

    @property
    def control_dim(self) -> int:
        return self.R.shape[0]

    def rate(self, x, u) -> np.ndarray:
        dx = np.asarray(x, dtype=float) - self.x_ref
        du = np.asarray(u, dtype=float) - self.u_ref
        return 0.5 * np.einsum("...i,ij,...j->...", dx, self.Q, dx) + 0.5 * np.einsum(
            "...i,ij,...j->...", du, self.R, du
        )

    def derivatives(self, x, u, dt: float) -> CostDerivatives:
        """Step cost ``rate * dt`` and its derivatives, batched over leading axes."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        n, m = self.state_dim, self.control_dim
        dx = x - self.x_ref
        du = u - self.u_ref
        lx = np.broadcast_to((dx @ self.Q.T) * dt, batch + (n,))
        lu = np.broadcast_to((du @ self.R.T) * dt, batch + (m,))
        lxx = np.broadcast_to(self.Q * dt, batch + (n, n))
        luu = np.broadcast_to(self.R * dt, batch + (m, m))
        lux = np.zeros(batch + (m, n))
        return CostDerivatives(
            np.broadcast_to(self.rate(x, u) * dt, batch), lx, lu, lxx, luu, lux
        )
