"""Benchmark problems: the two nonlinear examples and linear-Gaussian oracles.

Every preset is rebuilt from a flat parameter dict (``preset.params``),
which is what the problem file stores; see :func:`build_preset`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import QuadraticCost
from .covcon import CovControlOptions, TerminalConstraint, project_pd
from .dynamics import ControlledSDE
from .rollout import InitialCondition, MomentTrajectory
from .sddp.solver import Policy


@dataclass(frozen=True)
class ProblemPreset:
    name: str
    model: ControlledSDE
    running_cost: QuadraticCost
    init: InitialCondition
    constraint: TerminalConstraint
    T: float
    dt: float
    N: int
    kappa: int = 0
    eta1: float = 0.5
    eta2: float = 0.5
    seed: int = 0
    params: dict = field(default_factory=dict)
    linear: dict | None = None

    @property
    def horizon(self) -> tuple[float, float, int]:
        return self.T, self.dt, self.N

    def options(self, **overrides) -> CovControlOptions:
        """Outer-loop options carrying this preset's horizon, kappa, steps and seed."""
        kw = dict(N=self.N, dt=self.dt, kappa=self.kappa, eta1=self.eta1, eta2=self.eta2, seed=self.seed)
        kw.update(overrides)
        return CovControlOptions(**kw)


def horizon_steps(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    N = int(round(T / dt))
    if N < 1 or abs(N * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return N


def _mat(v, n):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    return a.reshape(n, n)


# -- one-dimensional cosine system ------------------------------------------


def cosine1d_model() -> ControlledSDE:
    """``dx = cos(x) dt + u dt + x^2 dw``."""
    return ControlledSDE(
        1, 1, 1,
        drift=lambda x, u: np.cos(x) + u,
        diffusion=lambda x, u: (x**2)[..., None] + 0.0 * u[..., None],
        drift_jac_x=lambda x, u: -np.sin(x)[..., None] + 0.0 * u[..., None],
        drift_jac_u=lambda x, u: np.ones(np.broadcast_shapes(x.shape, u.shape)[:-1] + (1, 1)),
        diffusion_jac_x=lambda x, u: (2.0 * x)[..., None, None] + 0.0 * u[..., None, None],
        diffusion_jac_u=lambda x, u: np.zeros(np.broadcast_shapes(x.shape, u.shape)[:-1] + (1, 1, 1)),
        drift_hess_xx=lambda x, u: -np.cos(x)[..., None, None] + 0.0 * u[..., None, None],
        drift_hess_uu=lambda x, u: np.zeros(np.broadcast_shapes(x.shape, u.shape)[:-1] + (1, 1, 1)),
        drift_hess_ux=lambda x, u: np.zeros(np.broadcast_shapes(x.shape, u.shape)[:-1] + (1, 1, 1)),
        name="cosine1d",
    )


def preset_cosine1d(
    r: float = 1e-4,
    mu_0: float = 0.0,
    Sigma_0: float = 0.25,
    mu_T: float = 0.0,
    Sigma_T: float = 0.03,
    dt: float = 0.01,
    T: float = 1.0,
    kappa: int = 0,
    seed: int = 0,
) -> ProblemPreset:
    """Scalar system with state-dependent noise; running cost ``r u^2``."""
    params = dict(r=r, mu_0=mu_0, Sigma_0=Sigma_0, mu_T=mu_T, Sigma_T=Sigma_T, dt=dt, T=T, kappa=kappa, seed=seed)
    return ProblemPreset(
        name="cosine1d",
        model=cosine1d_model(),
        running_cost=QuadraticCost.control_only(1, 2.0 * r),
        init=InitialCondition([mu_0], [[Sigma_0]]),
        constraint=TerminalConstraint([mu_T], [[Sigma_T]]),
        T=T, dt=dt, N=horizon_steps(T, dt), kappa=kappa, seed=seed,
        params=params,
    )


# -- inverted pendulum --------------------------------------------------------


def pendulum_model(alpha: float = 0.04, gravity: float = 4.0) -> ControlledSDE:
    """``dx1 = x2 dt``, ``dx2 = g sin(x1) dt + u dt + alpha u dw``; angle unwrapped."""

    def batch(x, u):
        return np.broadcast_shapes(x.shape[:-1], u.shape[:-1])

    def drift(x, u):
        return np.stack(np.broadcast_arrays(x[..., 1], gravity * np.sin(x[..., 0]) + u[..., 0]), axis=-1)

    def diffusion(x, u):
        out = np.zeros(batch(x, u) + (2, 1))
        out[..., 1, 0] = alpha * u[..., 0]
        return out

    def fx(x, u):
        out = np.zeros(batch(x, u) + (2, 2))
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = gravity * np.cos(x[..., 0])
        return out

    def fu(x, u):
        out = np.zeros(batch(x, u) + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    def Fx(x, u):
        return np.zeros(batch(x, u) + (1, 2, 2))

    def Fu(x, u):
        out = np.zeros(batch(x, u) + (1, 2, 1))
        out[..., 0, 1, 0] = alpha
        return out

    def fxx(x, u):
        out = np.zeros(batch(x, u) + (2, 2, 2))
        out[..., 1, 0, 0] = -gravity * np.sin(x[..., 0])
        return out

    return ControlledSDE(
        2, 1, 1, drift, diffusion,
        drift_jac_x=fx, drift_jac_u=fu, diffusion_jac_x=Fx, diffusion_jac_u=Fu,
        drift_hess_xx=fxx,
        drift_hess_uu=lambda x, u: np.zeros(batch(x, u) + (2, 1, 1)),
        drift_hess_ux=lambda x, u: np.zeros(batch(x, u) + (2, 1, 2)),
        name="pendulum",
    )


def preset_pendulum(
    alpha: float = 0.04,
    control_weight: float = 0.01,
    mu_0=(-np.pi, 0.0),
    Sigma_0=0.01,
    mu_T=(0.0, 0.0),
    Sigma_T=0.01,
    dt: float = 0.01,
    T: float = 4.0,
    kappa: int = 0,
    seed: int = 0,
    eta: float = 0.25,
) -> ProblemPreset:
    """Swing-up from hanging to upright; running cost ``control_weight * u^2``.

    ``Sigma_0`` and ``Sigma_T`` default to ``0.01 I`` (small enough for a
    reliable swing-up); scalars mean multiples of the identity.  The terminal
    mean is sensitive to ``lam`` here, so the multiplier step defaults to
    0.25; at 0.5 the mean residual overshoots and the ascent oscillates.
    """
    S0 = _mat(Sigma_0, 2)
    ST = _mat(Sigma_T, 2)
    params = dict(
        alpha=alpha, control_weight=control_weight,
        mu_0=[float(v) for v in mu_0], Sigma_0=S0.tolist(),
        mu_T=[float(v) for v in mu_T], Sigma_T=ST.tolist(),
        dt=dt, T=T, kappa=kappa, seed=seed, eta=eta,
    )
    return ProblemPreset(
        name="pendulum",
        model=pendulum_model(alpha),
        running_cost=QuadraticCost.control_only(2, 2.0 * control_weight),
        init=InitialCondition(mu_0, S0),
        constraint=TerminalConstraint(mu_T, ST),
        T=T, dt=dt, N=horizon_steps(T, dt), kappa=kappa, eta1=eta, eta2=eta, seed=seed,
        params=params,
    )


# -- linear-Gaussian oracles ----------------------------------------------------


def linear_model(A, B, F) -> ControlledSDE:
    """``dx = (A x + B u) dt + F dw`` with constant ``F``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    F = np.asarray(F, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape
    p = F.shape[1]

    def batch(x, u):
        return np.broadcast_shapes(x.shape[:-1], u.shape[:-1])

    return ControlledSDE(
        n, m, p,
        drift=lambda x, u: x @ A.T + u @ B.T,
        diffusion=lambda x, u: np.broadcast_to(F, batch(x, u) + (n, p)),
        drift_jac_x=lambda x, u: np.broadcast_to(A, batch(x, u) + (n, n)),
        drift_jac_u=lambda x, u: np.broadcast_to(B, batch(x, u) + (n, m)),
        diffusion_jac_x=lambda x, u: np.zeros(batch(x, u) + (p, n, n)),
        diffusion_jac_u=lambda x, u: np.zeros(batch(x, u) + (p, n, m)),
        drift_hess_xx=lambda x, u: np.zeros(batch(x, u) + (n, n, n)),
        drift_hess_uu=lambda x, u: np.zeros(batch(x, u) + (n, m, m)),
        drift_hess_ux=lambda x, u: np.zeros(batch(x, u) + (n, m, n)),
        name="linear",
    )


def lq_gains(A_d, B_d, Q_step, R_step, P_N, N):
    """Discrete Riccati recursion for ``sum 1/2 x'Qx + 1/2 u'Ru + 1/2 x'P_N x``.

    Returns gains ``K[i]`` (``u = K x``) and cost-to-go Hessians ``P[i]``.
    """
    n, m = B_d.shape
    P = np.empty((N + 1, n, n))
    K = np.empty((N, m, n))
    P[N] = P_N
    for i in range(N - 1, -1, -1):
        S = P[i + 1]
        Quu = R_step + B_d.T @ S @ B_d
        Qux = B_d.T @ S @ A_d
        K[i] = -np.linalg.solve(Quu, Qux)
        Pi = Q_step + A_d.T @ S @ A_d + Qux.T @ K[i]
        P[i] = 0.5 * (Pi + Pi.T)
    return K, P


def linear_moments(preset: ProblemPreset, policy: Policy) -> MomentTrajectory:
    """Exact closed-loop moments of a linear preset under an affine policy."""
    lin = preset.linear
    if lin is None:
        raise ValueError(f"preset {preset.name!r} is not linear")
    dt = preset.dt
    A = np.eye(lin["A"].shape[0]) + lin["A"] * dt
    B = lin["B"] * dt
    FF = lin["F"] @ lin["F"].T * dt
    nom = policy.nominal
    N = nom.horizon
    n = A.shape[0]
    means = np.empty((N + 1, n))
    covs = np.empty((N + 1, n, n))
    us = np.empty_like(nom.controls)
    means[0] = preset.init.mu_0
    covs[0] = preset.init.Sigma_0
    for i in range(N):
        us[i] = nom.controls[i] + policy.K[i] @ (means[i] - nom.states[i])
        Acl = A + B @ policy.K[i]
        means[i + 1] = A @ means[i] + B @ us[i]
        S = Acl @ covs[i] @ Acl.T + FF
        covs[i + 1] = 0.5 * (S + S.T)
    return MomentTrajectory(means, covs, us)


def _linear_preset(name, A, B, F, Q, R, mu_0, Sigma_0, mu_T, Sigma_T, dt, T, kappa, seed, params):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    F = np.asarray(F, dtype=float).reshape(n, -1)
    return ProblemPreset(
        name=name,
        model=linear_model(A, B, F),
        running_cost=QuadraticCost(_mat(Q, n), _mat(R, B.shape[1])),
        init=InitialCondition(mu_0, _mat(Sigma_0, n)),
        constraint=TerminalConstraint(mu_T, _mat(Sigma_T, n)),
        T=T, dt=dt, N=horizon_steps(T, dt), kappa=kappa, seed=seed,
        params=params,
        linear={"A": A, "B": B, "F": F},
    )


def reference_terminal_covariance(A, B, F, Q, R, Sigma_0, gamma_ref, dt, N) -> np.ndarray:
    """Terminal covariance reached by LQ feedback with terminal weight ``gamma_ref``.

    Any such covariance is attainable by the multiplier-parameterized
    policy class, which makes it a feasible target.
    """
    n = A.shape[0]
    A_d = np.eye(n) + A * dt
    B_d = B * dt
    K, _ = lq_gains(A_d, B_d, _mat(Q, n) * dt, _mat(R, B.shape[1]) * dt, 2.0 * gamma_ref, N)
    S = _mat(Sigma_0, n)
    for i in range(N):
        Acl = A_d + B_d @ K[i]
        S = Acl @ S @ Acl.T + F @ F.T * dt
    return 0.5 * (S + S.T)


def preset_linear_gaussian(
    n: int = 2,
    m: int = 1,
    seed: int = 0,
    noise: float = 0.2,
    dt: float = 0.05,
    T: float = 2.0,
    Sigma_0: float = 0.1,
    q: float = 0.1,
    r: float = 0.1,
    gamma_ref: float = 1.0,
    kappa: int = 0,
    A=None,
    B=None,
    F=None,
    mu_0=None,
    mu_T=None,
    Sigma_T=None,
) -> ProblemPreset:
    """Random stable linear SDE with additive noise ``noise * I``.

    Unless given, ``mu_0`` is random, ``mu_T = 0`` and ``Sigma_T`` is the
    covariance reached by LQ feedback with terminal weight ``gamma_ref I``
    (eigenvalues floored at ``1e-6``).
    Explicit matrices override the random draw (used by the problem file).
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    rng = np.random.default_rng(seed)
    if A is None:
        M = rng.normal(size=(n, n)) / np.sqrt(n)
        shift = max(0.0, float(np.max(np.linalg.eigvals(M).real))) + 0.5
        A = M - shift * np.eye(n)
    if B is None:
        B = rng.normal(size=(n, m))
    if F is None:
        F = noise * np.eye(n)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(n, m)
    F = np.asarray(F, dtype=float).reshape(n, -1)
    N = horizon_steps(T, dt)
    if mu_0 is None:
        mu_0 = rng.normal(size=n)
    if mu_T is None:
        mu_T = np.zeros(n)
    if Sigma_T is None:
        # a noise-free problem reaches a singular covariance; the target must stay definite
        Sigma_T = project_pd(reference_terminal_covariance(A, B, F, q, r, Sigma_0, gamma_ref * np.eye(n), dt, N))
    params = dict(
        n=n, m=m, seed=seed, noise=noise, dt=dt, T=T, Sigma_0=_mat(Sigma_0, n).tolist(),
        q=q, r=r, gamma_ref=gamma_ref, kappa=kappa,
        A=A.tolist(), B=B.tolist(), F=F.tolist(),
        mu_0=np.asarray(mu_0, dtype=float).tolist(), mu_T=np.asarray(mu_T, dtype=float).tolist(),
        Sigma_T=_mat(Sigma_T, n).tolist(),
    )
    return _linear_preset(
        "lq", A, B, F, _mat(q, n), _mat(r, m), mu_0, Sigma_0, mu_T, Sigma_T, dt, T, kappa, seed, params
    )


def preset_double_integrator(
    noise: float = 0.0,
    dt: float = 0.1,
    T: float = 5.0,
    q: float = 1.0,
    r: float = 0.1,
    mu_0=(1.0, 0.0),
    Sigma_0: float = 0.0,
    mu_T=(0.0, 0.0),
    Sigma_T: float = 0.01,
    kappa: int = 0,
    seed: int = 0,
) -> ProblemPreset:
    """Position/velocity double integrator, optionally with additive noise."""
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    F = noise * np.eye(2)
    params = dict(noise=noise, dt=dt, T=T, q=q, r=r, mu_0=list(mu_0), Sigma_0=Sigma_0,
                  mu_T=list(mu_T), Sigma_T=Sigma_T, kappa=kappa, seed=seed)
    return _linear_preset(
        "double_integrator", A, B, F, q, r, mu_0, Sigma_0, mu_T, Sigma_T, dt, T, kappa, seed, params
    )


PRESETS = {
    "cosine1d": preset_cosine1d,
    "pendulum": preset_pendulum,
    "lq": preset_linear_gaussian,
    "double_integrator": preset_double_integrator,
}


def build_preset(name: str, params: dict | None = None) -> ProblemPreset:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**(params or {}))
