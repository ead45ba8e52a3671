r"""Quadratic value / action-value models with multiplicative-noise terms.

The discrete perturbation dynamics are

.. math::

    \delta x' = A\,\delta x + B\,\delta u + \Gamma(\delta x, \delta u)\,\xi,
    \qquad \xi \sim N(0, dt\,I),

with diffusion column ``i`` affine in the perturbation,
``Gamma0[:, i] + Gamma_dx[i] dx + Gamma_du[i] du``.  Taking the expectation
of the quadratic value model over ``xi`` leaves the deterministic DDP terms
plus ``(dt / 2) * sum_i col_i^T Vxx col_i``.  Expanding that sum in
``(dx, du)`` gives the correction terms computed below: a constant, two
gradients and three curvature blocks.  The second-derivative-of-diffusion
terms (``F_tilde``, ``L_tilde``, ``Z_tilde``) vanish under the affine
diffusion model and are kept only as zero arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..costs import CostDerivatives
from ..dynamics import LocalModel
from ..errors import StructuralError


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass
class ValueExpansion:
    V: float
    Vx: np.ndarray
    Vxx: np.ndarray

    def __post_init__(self):
        self.Vx = np.asarray(self.Vx, dtype=float)
        self.Vxx = symmetrize(np.asarray(self.Vxx, dtype=float))

    def __call__(self, x_minus_nominal) -> np.ndarray:
        d = np.asarray(x_minus_nominal, dtype=float)
        return self.V + d @ self.Vx + 0.5 * np.einsum("...i,ij,...j->...", d, self.Vxx, d)


@dataclass
class NoiseCorrections:
    """Expectation-over-noise contributions to the action-value model.

    ``V_tilde`` is the constant term ``(dt/2) sum_i G0_i^T Vxx G0_i``.
    """

    S_tilde: np.ndarray
    U_tilde: np.ndarray
    F_tilde: np.ndarray
    L_tilde: np.ndarray
    Z_tilde: np.ndarray
    M_tilde: np.ndarray
    N_tilde: np.ndarray
    G_tilde: np.ndarray
    V_tilde: float = 0.0


@dataclass
class QExpansion:
    """Action-value model ``Q0 + Qx dx + Qu du + 1/2 [dx du] H [dx du]``."""

    Q0: float
    Qx: np.ndarray
    Qu: np.ndarray
    Qxx: np.ndarray
    Quu: np.ndarray
    Qux: np.ndarray
    corrections: NoiseCorrections

    @property
    def Qxu(self) -> np.ndarray:
        return np.swapaxes(self.Qux, -1, -2)

    def __call__(self, dx, du) -> float:
        dx = np.asarray(dx, dtype=float)
        du = np.asarray(du, dtype=float)
        return float(
            self.Q0
            + self.Qx @ dx
            + self.Qu @ du
            + 0.5 * dx @ self.Qxx @ dx
            + 0.5 * du @ self.Quu @ du
            + du @ self.Qux @ dx
        )


def _check(local: LocalModel, V_next: ValueExpansion):
    n = local.A.shape[-1]
    p = local.Gamma0.shape[-1]
    m = local.B.shape[-1]
    if V_next.Vxx.shape[-2:] != (n, n) or V_next.Vx.shape[-1:] != (n,):
        raise StructuralError(f"value expansion does not match state dimension {n}")
    if local.Gamma_dx.shape[-3:] != (p, n, n) or local.Gamma_du.shape[-3:] != (p, n, m):
        raise StructuralError("diffusion Jacobians do not match (p, n, n) / (p, n, m)")


def noise_corrections(local: LocalModel, V_next: ValueExpansion, dt: float) -> NoiseCorrections:
    _check(local, V_next)
    W = V_next.Vxx
    G0 = local.Gamma0
    Gx = local.Gamma_dx
    Gu = local.Gamma_du
    n = local.A.shape[-1]
    m = local.B.shape[-1]
    batch = G0.shape[:-2]
    # W G0_i for every column i: (..., n, p)
    WG0 = np.einsum("...ab,...bi->...ai", W, G0)
    S = dt * np.einsum("...ian,...ai->...n", Gx, WG0)
    U = dt * np.einsum("...iam,...ai->...m", Gu, WG0)
    WGx = np.einsum("...ab,...ibn->...ian", W, Gx)
    WGu = np.einsum("...ab,...ibm->...iam", W, Gu)
    M = dt * np.einsum("...iak,...ial->...kl", Gx, WGx)
    Nt = dt * np.einsum("...iak,...iam->...km", Gx, WGu)
    G = dt * np.einsum("...iak,...ial->...kl", Gu, WGu)
    V = 0.5 * dt * np.einsum("...ai,...ai->...", G0, WG0)
    return NoiseCorrections(
        S_tilde=S,
        U_tilde=U,
        F_tilde=np.zeros(batch + (n, n)),
        L_tilde=np.zeros(batch + (n, m)),
        Z_tilde=np.zeros(batch + (m, m)),
        M_tilde=symmetrize(M),
        N_tilde=Nt,
        G_tilde=symmetrize(G),
        V_tilde=V,
    )


def q_expansion(
    local: LocalModel,
    cost: CostDerivatives,
    V_next: ValueExpansion,
    kappa: int = 0,
    dt: float | None = None,
) -> QExpansion:
    """Action-value expansion at one step.

    ``cost`` holds step-cost derivatives already multiplied by ``dt``.
    With ``kappa = 1`` the drift curvature of the discrete map contracted
    with ``V_next.Vx`` is added.
    """
    if kappa not in (0, 1):
        raise ValueError("kappa must be 0 or 1")
    dt = local.dt if dt is None else dt
    corr = noise_corrections(local, V_next, dt)
    A, B = local.A, local.B
    Vx, Vxx = V_next.Vx, V_next.Vxx
    Qx = cost.lx + A.T @ Vx + corr.S_tilde
    Qu = cost.lu + B.T @ Vx + corr.U_tilde
    Qxx = cost.lxx + A.T @ Vxx @ A + corr.M_tilde + corr.F_tilde
    Quu = cost.luu + B.T @ Vxx @ B + corr.G_tilde + corr.Z_tilde
    Qux = cost.lux + B.T @ Vxx @ A + corr.N_tilde.T + corr.L_tilde.T
    if kappa == 1:
        if local.second_order is None:
            raise StructuralError("kappa=1 needs the second-order terms of the local model")
        fxx, fuu, fux = local.second_order
        Qxx = Qxx + np.einsum("a,abc->bc", Vx, fxx)
        Quu = Quu + np.einsum("a,abc->bc", Vx, fuu)
        Qux = Qux + np.einsum("a,abc->bc", Vx, fux)
    Q0 = float(cost.l) + float(V_next.V) + float(corr.V_tilde)
    return QExpansion(Q0, Qx, Qu, symmetrize(Qxx), symmetrize(Quu), Qux, corr)


def value_update(Q: QExpansion, mu: float = 0.0):
    """Gains and cost-to-go model from a Q expansion.

    Returns ``(k, K, value, (dV1, dV2))`` where the predicted change of the
    Q model under the step ``du = k`` is ``dV1 + dV2``.  Raises
    ``numpy.linalg.LinAlgError`` if ``Quu + mu I`` is not positive definite.
    """
    m = Q.Quu.shape[0]
    L = np.linalg.cholesky(Q.Quu + mu * np.eye(m))
    rhs = np.column_stack([Q.Qu, Q.Qux])
    sol = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    k = -sol[:, 0]
    K = -sol[:, 1:]
    dV1 = float(k @ Q.Qu)
    dV2 = float(0.5 * k @ Q.Quu @ k)
    Vx = Q.Qx + K.T @ Q.Quu @ k + K.T @ Q.Qu + Q.Qxu @ k
    Vxx = Q.Qxx + K.T @ Q.Quu @ K + K.T @ Q.Qux + Q.Qxu @ K
    return k, K, ValueExpansion(Q.Q0 + dV1 + dV2, Vx, Vxx), (dV1, dV2)
