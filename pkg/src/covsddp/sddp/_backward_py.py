"""Pure-Python backward recursion (reference path and import fallback).

Signature and results match the compiled kernel in ``_backward_ext.pyx``.
"""

from __future__ import annotations

import numpy as np

from ..costs import CostDerivatives
from ..dynamics import LocalModel
from .expansion import ValueExpansion, q_expansion, value_update


def backward_recursion(
    A, B, G0, Gx, Gu,
    l, lx, lu, lxx, luu, lux,
    fxx, fuu, fux,
    V_N, Vx_N, Vxx_N,
    mu, dt, use_second,
):
    N, n, m = B.shape
    k = np.zeros((N, m))
    K = np.zeros((N, m, n))
    V = np.zeros(N + 1)
    Vx = np.zeros((N + 1, n))
    Vxx = np.zeros((N + 1, n, n))
    Quu = np.zeros((N, m, m))
    V[N] = V_N
    Vx[N] = Vx_N
    Vxx[N] = 0.5 * (Vxx_N + Vxx_N.T)
    dV1 = dV2 = 0.0
    for i in range(N - 1, -1, -1):
        second = (fxx[i], fuu[i], fux[i]) if use_second else None
        local = LocalModel(A[i], B[i], G0[i], Gx[i], Gu[i], dt, second)
        cost = CostDerivatives(l[i], lx[i], lu[i], lxx[i], luu[i], lux[i])
        Q = q_expansion(local, cost, ValueExpansion(V[i + 1], Vx[i + 1], Vxx[i + 1]), int(use_second), dt)
        Quu[i] = Q.Quu
        try:
            k[i], K[i], val, (d1, d2) = value_update(Q, mu)
        except np.linalg.LinAlgError:
            return i, k, K, V, Vx, Vxx, Quu, dV1, dV2
        V[i], Vx[i], Vxx[i] = val.V, val.Vx, val.Vxx
        dV1 += d1
        dV2 += d2
    return -1, k, K, V, Vx, Vxx, Quu, dV1, dV2
