"""Closed-loop Monte-Carlo rollouts and terminal-moment estimation.

Every sample owns a Philox stream keyed by the master seed with the sample
index in the high counter word, so sample ``i`` sees the same noise no
matter how many samples are drawn or in which order they run.  Samples are
stepped together as one batch; only finite rows are advanced.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .costs import QuadraticCost
from .dynamics import ControlledSDE, discretize_linearize, em_update
from .errors import EstimationError, RolloutDivergenceError
from .sddp.solver import Policy

#: fraction of diverged samples above which a batch is rejected
MAX_DIVERGED_FRACTION = 0.01


@dataclass(frozen=True)
class InitialCondition:
    mu_0: np.ndarray
    Sigma_0: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_0, dtype=float))
        S = np.atleast_2d(np.asarray(self.Sigma_0, dtype=float))
        if S.shape != (mu.size, mu.size):
            raise ValueError(f"Sigma_0 must be {mu.size}x{mu.size}")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("Sigma_0 must be symmetric")
        if np.linalg.eigvalsh(S).min() < -1e-12:
            raise ValueError("Sigma_0 must be positive semidefinite")
        object.__setattr__(self, "mu_0", mu)
        object.__setattr__(self, "Sigma_0", 0.5 * (S + S.T))

    def sqrt_cov(self) -> np.ndarray:
        w, V = np.linalg.eigh(self.Sigma_0)
        return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class SampleBatch:
    """Terminal states of the finite samples; paths only if requested."""

    terminal_states: np.ndarray
    seed: int
    n_samples: int
    n_diverged: int = 0
    full_paths: Optional[np.ndarray] = None
    full_controls: Optional[np.ndarray] = None
    running_costs: Optional[np.ndarray] = None


@dataclass
class MomentEstimate:
    """Population-convention (1/n) moments of a terminal sample."""

    mean: np.ndarray
    second_moment: np.ndarray
    covariance: np.ndarray
    std_error_mean: np.ndarray
    std_error_cov: np.ndarray
    n_samples: int


@dataclass
class MomentTrajectory:
    means: np.ndarray
    covariances: np.ndarray
    controls: np.ndarray


def philox_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Generator for sample ``index``; independent of all other indices."""
    return np.random.Generator(
        np.random.Philox(key=philox_key(seed), counter=np.array([0, 0, 0, index], dtype=np.uint64))
    )


@lru_cache(maxsize=8)
def _standard_normals(seed: int, n_samples: int, width: int) -> np.ndarray:
    key = philox_key(seed)
    out = np.empty((n_samples, width))
    counter = np.zeros(4, dtype=np.uint64)
    for i in range(n_samples):
        counter[3] = i
        out[i] = np.random.Generator(np.random.Philox(key=key, counter=counter)).standard_normal(width)
    out.setflags(write=False)
    return out


def draw_standard_normals(seed: int, n_samples: int, width: int) -> np.ndarray:
    """``(n_samples, width)`` standard normals, row ``i`` from stream ``i``."""
    return _standard_normals(int(seed), int(n_samples), int(width))


def sample_closed_loop(
    model: ControlledSDE,
    policy: Policy,
    init: InitialCondition,
    n_samples: int,
    seed: int,
    *,
    keep_paths: bool = False,
    running_cost: QuadraticCost | None = None,
    feedforward: bool = False,
) -> SampleBatch:
    """Simulate ``u_i = u_bar_i + K_i (x_i - x_bar_i)`` with Euler-Maruyama noise.

    Each sample starts at ``x_0 ~ N(mu_0, Sigma_0)`` and receives increments
    ``xi ~ N(0, dt I)``.  Rows that become non-finite are dropped and
    counted; more than 1% dropped raises :class:`RolloutDivergenceError`.
    ``feedforward=True`` also adds the policy's ``k`` term.
    """
    n_samples = int(n_samples)
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    nominal = policy.nominal
    N, dt = nominal.horizon, nominal.dt
    n, m, p = model.state_dim, model.control_dim, model.noise_dim
    z = draw_standard_normals(seed, n_samples, n + N * p)
    x = init.mu_0 + z[:, :n] @ init.sqrt_cov().T
    xi = z[:, n:].reshape(n_samples, N, p) * np.sqrt(dt)

    alive = np.ones(n_samples, dtype=bool)
    paths = controls = None
    if keep_paths:
        paths = np.full((n_samples, N + 1, n), np.nan)
        controls = np.full((n_samples, N, m), np.nan)
        paths[:, 0] = x
    cost = np.zeros(n_samples) if running_cost is not None else None

    with np.errstate(all="ignore"):
        for i in range(N):
            idx = np.flatnonzero(alive)
            xa = x[idx]
            u = policy.feedback(i, xa)
            if feedforward:
                u = u + policy.k[i]
            x_next = em_update(xa, model.f(xa, u, check=False), model.F(xa, u, check=False), dt, xi[idx, i])
            ok = np.all(np.isfinite(x_next), axis=1)
            alive[idx[~ok]] = False
            x[idx] = x_next
            if cost is not None:
                cost[idx] += running_cost.rate(xa, u) * dt
            if keep_paths:
                controls[idx, i] = u
                paths[idx, i + 1] = x_next

    n_div = int(n_samples - alive.sum())
    if n_div > MAX_DIVERGED_FRACTION * n_samples:
        raise RolloutDivergenceError(f"{n_div} of {n_samples} samples diverged")
    return SampleBatch(
        terminal_states=x[alive],
        seed=int(seed),
        n_samples=int(alive.sum()),
        n_diverged=n_div,
        full_paths=None if paths is None else paths[alive],
        full_controls=None if controls is None else controls[alive],
        running_costs=None if cost is None else cost[alive],
    )


def estimate_moments(batch: SampleBatch | np.ndarray) -> MomentEstimate:
    X = batch.terminal_states if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=float)
    X = np.atleast_2d(X)
    S = X.shape[0]
    if S < 2:
        raise EstimationError(f"need at least 2 samples, got {S}")
    mean = X.mean(axis=0)
    second = X.T @ X / S
    second = 0.5 * (second + second.T)
    cov = second - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    se_mean = X.std(axis=0, ddof=1) / np.sqrt(S)
    D = X - mean
    prods = D[:, :, None] * D[:, None, :]
    se_cov = prods.std(axis=0, ddof=1) / np.sqrt(S)
    return MomentEstimate(mean, second, cov, se_mean, se_cov, S)


def propagate_moments_gaussian(model: ControlledSDE, policy: Policy, init: InitialCondition) -> MomentTrajectory:
    """First-order Gaussian closure of the closed-loop moments.

    ``mu' = mu + f(mu, u(mu)) dt`` and
    ``Sigma' = Acl Sigma Acl^T + dt sum_i (g_i g_i^T + D_i Sigma D_i^T)``
    with ``Acl = A + B K``, ``g_i`` diffusion column ``i`` at the mean and
    ``D_i = dF_i/dx + dF_i/du K`` its closed-loop Jacobian.
    """
    nominal = policy.nominal
    N, dt = nominal.horizon, nominal.dt
    n, m = model.state_dim, model.control_dim
    means = np.empty((N + 1, n))
    covs = np.empty((N + 1, n, n))
    us = np.empty((N, m))
    means[0] = init.mu_0
    covs[0] = init.Sigma_0
    for i in range(N):
        mu, S = means[i], covs[i]
        u = policy.feedback(i, mu)
        loc = discretize_linearize(model, mu, u, dt, 0)
        Acl = loc.A + loc.B @ policy.K[i]
        D = loc.Gamma_dx + loc.Gamma_du @ policy.K[i]
        G0 = loc.Gamma0
        S_next = Acl @ S @ Acl.T + dt * (G0 @ G0.T + np.einsum("iab,bc,idc->ad", D, S, D))
        mu_next = mu + model.f(mu, u) * dt
        if not (np.all(np.isfinite(mu_next)) and np.all(np.isfinite(S_next))):
            raise RolloutDivergenceError("moment propagation diverged", i + 1)
        us[i] = u
        means[i + 1] = mu_next
        covs[i + 1] = 0.5 * (S_next + S_next.T)
    return MomentTrajectory(means, covs, us)


def gaussian_terminal_estimate(traj: MomentTrajectory) -> MomentEstimate:
    mean = traj.means[-1]
    cov = traj.covariances[-1]
    n = mean.size
    return MomentEstimate(mean, cov + np.outer(mean, mean), cov, np.zeros(n), np.zeros((n, n)), 0)
