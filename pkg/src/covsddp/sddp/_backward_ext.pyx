# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backward recursion; same contract as ``_backward_py.backward_recursion``."""

import numpy as np
from libc.math cimport sqrt


cdef bint _cholesky(double[:, ::1] M, double[:, ::1] L, Py_ssize_t m, double mu) noexcept nogil:
    cdef Py_ssize_t r, c, t
    cdef double s
    for r in range(m):
        for c in range(r + 1):
            s = M[r, c]
            if r == c:
                s += mu
            for t in range(c):
                s -= L[r, t] * L[c, t]
            if r == c:
                if not s > 0.0:
                    return False
                L[r, r] = sqrt(s)
            else:
                L[r, c] = s / L[c, c]
    return True


cdef void _chol_solve(double[:, ::1] L, double[::1] b, Py_ssize_t m) noexcept nogil:
    # overwrites b with (L L^T)^{-1} b
    cdef Py_ssize_t r, t
    cdef double s
    for r in range(m):
        s = b[r]
        for t in range(r):
            s -= L[r, t] * b[t]
        b[r] = s / L[r, r]
    for r in range(m - 1, -1, -1):
        s = b[r]
        for t in range(r + 1, m):
            s -= L[t, r] * b[t]
        b[r] = s / L[r, r]


def backward_recursion(
    const double[:, :, ::1] A, const double[:, :, ::1] B, const double[:, :, ::1] G0,
    const double[:, :, :, ::1] Gx, const double[:, :, :, ::1] Gu,
    const double[::1] l, const double[:, ::1] lx, const double[:, ::1] lu,
    const double[:, :, ::1] lxx, const double[:, :, ::1] luu, const double[:, :, ::1] lux,
    fxx_in, fuu_in, fux_in,
    double V_N, const double[::1] Vx_N, const double[:, ::1] Vxx_N,
    double mu, double dt, bint use_second,
):
    cdef Py_ssize_t N = B.shape[0], n = B.shape[1], m = B.shape[2], p = G0.shape[2]
    cdef Py_ssize_t i, a, b, c, j, q, r
    cdef Py_ssize_t fail = -1
    cdef double s, d1, d2, dV1 = 0.0, dV2 = 0.0, vt

    k_arr = np.zeros((N, m))
    K_arr = np.zeros((N, m, n))
    V_arr = np.zeros(N + 1)
    Vx_arr = np.zeros((N + 1, n))
    Vxx_arr = np.zeros((N + 1, n, n))
    Quu_arr = np.zeros((N, m, m))
    cdef double[:, ::1] k = k_arr
    cdef double[:, :, ::1] K = K_arr
    cdef double[::1] V = V_arr
    cdef double[:, ::1] Vx = Vx_arr
    cdef double[:, :, ::1] Vxx = Vxx_arr
    cdef double[:, :, ::1] Quu_out = Quu_arr

    cdef const double[:, :, :, ::1] fxx
    cdef const double[:, :, :, ::1] fuu
    cdef const double[:, :, :, ::1] fux
    if use_second:
        fxx = fxx_in
        fuu = fuu_in
        fux = fux_in

    cdef double[:, ::1] WG0 = np.empty((n, p))
    cdef double[:, :, ::1] WGx = np.empty((p, n, n))
    cdef double[:, :, ::1] WGu = np.empty((p, n, m))
    cdef double[:, ::1] WA = np.empty((n, n))
    cdef double[:, ::1] WB = np.empty((n, m))
    cdef double[::1] Qx = np.empty(n)
    cdef double[::1] Qu = np.empty(m)
    cdef double[:, ::1] Qxx = np.empty((n, n))
    cdef double[:, ::1] Quu = np.empty((m, m))
    cdef double[:, ::1] Qux = np.empty((m, n))
    cdef double[:, ::1] L = np.zeros((m, m))
    cdef double[::1] col = np.empty(m)
    cdef double[::1] Quuk = np.empty(m)
    cdef double[:, ::1] QuuK = np.empty((m, n))

    V[N] = V_N
    for a in range(n):
        Vx[N, a] = Vx_N[a]
        for b in range(n):
            Vxx[N, a, b] = 0.5 * (Vxx_N[a, b] + Vxx_N[b, a])

    with nogil:
        for i in range(N - 1, -1, -1):
            # W = Vxx[i+1]; products with the diffusion and dynamics factors
            for a in range(n):
                for c in range(p):
                    s = 0.0
                    for b in range(n):
                        s = s + Vxx[i + 1, a, b] * G0[i, b, c]
                    WG0[a, c] = s
                for q in range(n):
                    s = 0.0
                    for b in range(n):
                        s = s + Vxx[i + 1, a, b] * A[i, b, q]
                    WA[a, q] = s
                for j in range(m):
                    s = 0.0
                    for b in range(n):
                        s = s + Vxx[i + 1, a, b] * B[i, b, j]
                    WB[a, j] = s
            for c in range(p):
                for a in range(n):
                    for q in range(n):
                        s = 0.0
                        for b in range(n):
                            s = s + Vxx[i + 1, a, b] * Gx[i, c, b, q]
                        WGx[c, a, q] = s
                    for j in range(m):
                        s = 0.0
                        for b in range(n):
                            s = s + Vxx[i + 1, a, b] * Gu[i, c, b, j]
                        WGu[c, a, j] = s

            vt = 0.0
            for a in range(n):
                for c in range(p):
                    vt = vt + G0[i, a, c] * WG0[a, c]
            vt = 0.5 * dt * vt

            # gradients
            for q in range(n):
                s = lx[i, q]
                for a in range(n):
                    s = s + A[i, a, q] * Vx[i + 1, a]
                for c in range(p):
                    for a in range(n):
                        s = s + dt * Gx[i, c, a, q] * WG0[a, c]
                Qx[q] = s
            for j in range(m):
                s = lu[i, j]
                for a in range(n):
                    s = s + B[i, a, j] * Vx[i + 1, a]
                for c in range(p):
                    for a in range(n):
                        s = s + dt * Gu[i, c, a, j] * WG0[a, c]
                Qu[j] = s

            # curvature blocks
            for q in range(n):
                for r in range(n):
                    s = lxx[i, q, r]
                    for a in range(n):
                        s = s + A[i, a, q] * WA[a, r]
                    for c in range(p):
                        for a in range(n):
                            s = s + dt * Gx[i, c, a, q] * WGx[c, a, r]
                    if use_second:
                        for a in range(n):
                            s = s + Vx[i + 1, a] * fxx[i, a, q, r]
                    Qxx[q, r] = s
            for j in range(m):
                for r in range(m):
                    s = luu[i, j, r]
                    for a in range(n):
                        s = s + B[i, a, j] * WB[a, r]
                    for c in range(p):
                        for a in range(n):
                            s = s + dt * Gu[i, c, a, j] * WGu[c, a, r]
                    if use_second:
                        for a in range(n):
                            s = s + Vx[i + 1, a] * fuu[i, a, j, r]
                    Quu[j, r] = s
                for q in range(n):
                    s = lux[i, j, q]
                    for a in range(n):
                        s = s + B[i, a, j] * WA[a, q]
                    for c in range(p):
                        for a in range(n):
                            s = s + dt * Gx[i, c, a, q] * WGu[c, a, j]
                    if use_second:
                        for a in range(n):
                            s = s + Vx[i + 1, a] * fux[i, a, j, q]
                    Qux[j, q] = s
            for q in range(n):
                for r in range(q + 1, n):
                    s = 0.5 * (Qxx[q, r] + Qxx[r, q])
                    Qxx[q, r] = s
                    Qxx[r, q] = s
            for j in range(m):
                for r in range(j + 1, m):
                    s = 0.5 * (Quu[j, r] + Quu[r, j])
                    Quu[j, r] = s
                    Quu[r, j] = s
                for r in range(m):
                    Quu_out[i, j, r] = Quu[j, r]

            if not _cholesky(Quu, L, m, mu):
                fail = i
                break

            # k = -(Quu + mu I)^{-1} Qu, K = -(Quu + mu I)^{-1} Qux
            for j in range(m):
                col[j] = Qu[j]
            _chol_solve(L, col, m)
            for j in range(m):
                k[i, j] = -col[j]
            for q in range(n):
                for j in range(m):
                    col[j] = Qux[j, q]
                _chol_solve(L, col, m)
                for j in range(m):
                    K[i, j, q] = -col[j]

            d1 = 0.0
            d2 = 0.0
            for j in range(m):
                s = 0.0
                for r in range(m):
                    s = s + Quu[j, r] * k[i, r]
                Quuk[j] = s
                d1 = d1 + k[i, j] * Qu[j]
                d2 = d2 + 0.5 * k[i, j] * s
                for q in range(n):
                    s = 0.0
                    for r in range(m):
                        s = s + Quu[j, r] * K[i, r, q]
                    QuuK[j, q] = s
            dV1 = dV1 + d1
            dV2 = dV2 + d2
            V[i] = l[i] + V[i + 1] + vt + d1 + d2

            # Vx = Qx + K^T Quu k + K^T Qu + Qxu k
            for q in range(n):
                s = Qx[q]
                for j in range(m):
                    s = s + K[i, j, q] * (Quuk[j] + Qu[j]) + Qux[j, q] * k[i, j]
                Vx[i, q] = s
            # Vxx = Qxx + K^T Quu K + K^T Qux + Qxu K
            for q in range(n):
                for r in range(n):
                    s = Qxx[q, r]
                    for j in range(m):
                        s = s + K[i, j, q] * (QuuK[j, r] + Qux[j, r]) + Qux[j, q] * K[i, j, r]
                    Vxx[i, q, r] = s
            for q in range(n):
                for r in range(q + 1, n):
                    s = 0.5 * (Vxx[i, q, r] + Vxx[i, r, q])
                    Vxx[i, q, r] = s
                    Vxx[i, r, q] = s

    return fail, k_arr, K_arr, V_arr, Vx_arr, Vxx_arr, Quu_arr, dV1, dV2
