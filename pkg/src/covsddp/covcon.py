r"""Terminal mean/covariance steering by dual ascent around SDDP.

For fixed multipliers the terminal cost is

.. math::

    \lambda^T (x - \mu_T) + \mathrm{tr}\big(\gamma^T (x x^T - \mu_T \mu_T^T - \Sigma_T)\big),

SDDP returns a nominal and a feedback policy, the closed-loop terminal
moments are estimated, and the multipliers move along the constraint
residuals.  ``gamma`` is kept symmetric positive definite so the terminal
cost stays convex.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .costs import QuadraticCost
from .dynamics import ControlledSDE
from .errors import RolloutDivergenceError, StructuralError
from .rollout import (
    InitialCondition,
    MomentEstimate,
    estimate_moments,
    gaussian_terminal_estimate,
    propagate_moments_gaussian,
    sample_closed_loop,
)
from .sddp.solver import (
    Policy,
    SDDPDiagnostics,
    SDDPOptions,
    SDDPProblem,
    Trajectory,
    solve_sddp,
)

log = logging.getLogger(__name__)

#: smallest eigenvalue kept by the positive-definite projection
EPS_PD = 1e-6

__all__ = [
    "CovControlOptions",
    "CovControlResult",
    "InitialCondition",
    "Multipliers",
    "OuterStep",
    "TerminalConstraint",
    "multiplier_gradients",
    "project_pd",
    "solve_covariance_control",
    "terminal_cost_expansion",
    "update_multipliers",
]


@dataclass(frozen=True)
class TerminalConstraint:
    mu_T: np.ndarray
    Sigma_T: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_T, dtype=float))
        S = np.atleast_2d(np.asarray(self.Sigma_T, dtype=float))
        if S.shape != (mu.size, mu.size):
            raise ValueError(f"Sigma_T must be {mu.size}x{mu.size}")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("Sigma_T must be symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise ValueError("Sigma_T must be positive definite")
        object.__setattr__(self, "mu_T", mu)
        object.__setattr__(self, "Sigma_T", 0.5 * (S + S.T))

    @property
    def second_moment(self) -> np.ndarray:
        return np.outer(self.mu_T, self.mu_T) + self.Sigma_T


@dataclass(frozen=True)
class Multipliers:
    """``lam`` pairs with the mean constraint, ``gamma`` with the second moment."""

    lam: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if g.shape != (lam.size, lam.size):
            raise StructuralError(f"gamma must be {lam.size}x{lam.size}")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def initial(cls, n: int, gamma_scale: float = 0.1) -> "Multipliers":
        return cls(np.zeros(n), gamma_scale * np.eye(n))

    @property
    def min_gamma_eig(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.gamma + self.gamma.T)).min())


def _require_symmetric(g: np.ndarray):
    if not np.allclose(g, g.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(g).max())):
        raise StructuralError("gamma must be symmetric; symmetrize before building the terminal cost")


def terminal_cost_expansion(mult: Multipliers, constraint: TerminalConstraint, x):
    """Value, gradient and Hessian of the multiplier terminal cost at ``x``.

    The cost is quadratic, so the expansion is exact.
    """
    g = mult.gamma
    _require_symmetric(g)
    x = np.asarray(x, dtype=float)
    mu = constraint.mu_T
    value = float(mult.lam @ (x - mu) + np.sum(g * (np.outer(x, x) - constraint.second_moment)))
    grad = mult.lam + 2.0 * g @ x
    hess = 2.0 * g
    return value, grad, hess


def terminal_cost_values(mult: Multipliers, constraint: TerminalConstraint, X) -> np.ndarray:
    """Terminal cost for a batch of states ``(S, n)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    quad = np.einsum("si,ij,sj->s", X, mult.gamma, X)
    return (X - constraint.mu_T) @ mult.lam + quad - np.sum(mult.gamma * constraint.second_moment)


def multiplier_gradients(moments, constraint: TerminalConstraint):
    """Dual gradients ``(E[x] - mu_T, sym(E[x x^T]) - mu_T mu_T^T - Sigma_T)``.

    ``moments`` is a :class:`MomentEstimate` or a ``(mean, second_moment)`` pair.
    """
    if isinstance(moments, MomentEstimate):
        mean, second = moments.mean, moments.second_moment
    else:
        mean, second = moments
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    second = np.atleast_2d(np.asarray(second, dtype=float))
    n = constraint.mu_T.size
    if mean.shape != (n,) or second.shape != (n, n):
        raise StructuralError("moment estimates do not match the constraint dimension")
    V_lam = mean - constraint.mu_T
    V_gamma = 0.5 * (second + second.T) - constraint.second_moment
    return V_lam, V_gamma


def project_pd(M, eps: float = EPS_PD) -> np.ndarray:
    """Symmetrize, then lift eigenvalues below ``eps`` to ``eps``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    S = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= eps:
        return S
    P = (V * np.maximum(w, eps)) @ V.T
    return 0.5 * (P + P.T)


def update_multipliers(mult: Multipliers, grads, eta1: float, eta2: float, eps: float = EPS_PD) -> Multipliers:
    if not (0.0 <= eta1 <= 1.0 and 0.0 <= eta2 <= 1.0):
        raise ValueError("step sizes must lie in [0, 1]")
    V_lam, V_gamma = grads
    gamma = project_pd(mult.gamma + eta2 * np.asarray(V_gamma, dtype=float), eps)
    return Multipliers(mult.lam + eta1 * np.asarray(V_lam, dtype=float), gamma)


@dataclass
class CovControlOptions:
    """Outer-loop settings.

    ``samples_coarse`` are used while the largest residual exceeds
    ``coarse_threshold``, ``samples_fine`` after that.  Each sample count
    has its own fixed seed, so successive dual estimates with the same count
    use common random numbers.
    """

    N: int
    dt: float
    kappa: int = 0
    eta1: float = 0.5
    eta2: float = 0.5
    eta_min: float = 1e-8
    eta_growth: float = 1.5
    tol_constraint: float = 0.01
    max_outer: int = 300
    samples_coarse: int = 80
    samples_fine: int = 800
    coarse_threshold: float = 0.1
    seed: int = 0
    estimator: str = "mc"
    lam0: Optional[np.ndarray] = None
    gamma0: Optional[np.ndarray] = None
    eps_pd: float = EPS_PD
    sddp: SDDPOptions = field(default_factory=SDDPOptions)

    def __post_init__(self):
        if self.estimator not in ("mc", "gaussian"):
            raise ValueError("estimator must be 'mc' or 'gaussian'")
        if self.kappa not in (0, 1):
            raise ValueError("kappa must be 0 or 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (0 <= self.eta1 <= 1 and 0 <= self.eta2 <= 1):
            raise ValueError("eta1 and eta2 must lie in [0, 1]")
        if self.eta_growth < 1:
            raise ValueError("eta_growth must be at least 1")
        if self.max_outer < 1:
            raise ValueError("max_outer must be positive")
        if self.tol_constraint <= 0:
            raise ValueError("tol_constraint must be positive")


@dataclass
class OuterStep:
    """One outer iteration: the multipliers evaluated and what came of it."""

    iteration: int
    lam: np.ndarray
    gamma: np.ndarray
    mean_residual: float
    cov_residual: float
    grad_lam_norm: float
    grad_gamma_norm: float
    dual_value: float
    n_samples: int
    accepted: bool
    eta1: float
    eta2: float
    sddp_iterations: int
    sddp_converged: bool


@dataclass
class CovControlResult:
    trajectory: Trajectory
    policy: Policy
    multipliers: Multipliers
    terminal_mean_est: np.ndarray
    terminal_cov_est: np.ndarray
    constraint_residuals: tuple
    outer_iterations: int
    sample_counts_used: list
    converged: bool
    history: list = field(default_factory=list)
    sddp_diagnostics: Optional[SDDPDiagnostics] = None
    moments: Optional[MomentEstimate] = None


@dataclass
class _Eval:
    mult: Multipliers
    traj: Trajectory
    policy: Policy
    diag: SDDPDiagnostics
    moments: MomentEstimate
    grads: tuple
    dual: float
    n_samples: int
    dual_samples: Optional[np.ndarray] = None


def residual_norms(moments: MomentEstimate, constraint: TerminalConstraint) -> tuple[float, float]:
    """``(|mean - mu_T|_inf, max |cov - Sigma_T|)``."""
    return (
        float(np.max(np.abs(moments.mean - constraint.mu_T))),
        float(np.max(np.abs(moments.covariance - constraint.Sigma_T))),
    )


def solve_covariance_control(
    model: ControlledSDE,
    running_cost: QuadraticCost,
    init: InitialCondition,
    constraint: TerminalConstraint,
    options: CovControlOptions,
    u_init=None,
    callback: Callable[[OuterStep], None] | None = None,
) -> CovControlResult:
    """Alternate SDDP solves, moment estimation and multiplier ascent.

    A step is rejected (and both step sizes halved) when the dual estimate
    drops relative to the last accepted point evaluated with the same
    sample count; the ascent is then retried from that point.  Stops when
    ``|V_lam|_inf`` and ``max |V_gamma|`` are both below ``tol_constraint``
    or after ``max_outer`` evaluations.
    """
    opts = options
    n, m = model.state_dim, model.control_dim
    lam0 = np.zeros(n) if opts.lam0 is None else opts.lam0
    gamma0 = 0.1 * np.eye(n) if opts.gamma0 is None else opts.gamma0
    mult = Multipliers(lam0, project_pd(gamma0, opts.eps_pd))
    u_warm = np.zeros((opts.N, m)) if u_init is None else np.asarray(u_init, dtype=float)
    eta1, eta2 = opts.eta1, opts.eta2

    def evaluate(mult: Multipliers, u0, n_samples: int) -> _Eval:
        def terminal(x):
            return terminal_cost_expansion(mult, constraint, x)

        problem = SDDPProblem(model, running_cost, terminal, init.mu_0, opts.N, opts.dt, opts.kappa)
        traj, policy, diag = solve_sddp(problem, u0, opts.sddp)
        if opts.estimator == "mc":
            batch = sample_closed_loop(
                model, policy, init, n_samples, _batch_seed(opts.seed, n_samples),
                running_cost=running_cost,
            )
            mom = estimate_moments(batch)
            per_sample = batch.running_costs + terminal_cost_values(mult, constraint, batch.terminal_states)
            dual = float(np.mean(per_sample))
        else:
            mt = propagate_moments_gaussian(model, policy, init)
            mom = gaussian_terminal_estimate(mt)
            per_sample = None
            dual = _gaussian_dual(running_cost, policy, mt, mult, constraint, opts.dt)
        grads = multiplier_gradients(mom, constraint)
        return _Eval(mult, traj, policy, diag, mom, grads, dual, n_samples, per_sample)

    history: list[OuterStep] = []
    counts: list[int] = []
    best: _Eval | None = None
    n_samples = opts.samples_coarse
    converged = False
    current = None
    for it in range(opts.max_outer):
        u0 = best.traj.controls if best is not None else u_warm
        counts.append(n_samples)
        try:
            current = evaluate(mult, u0, n_samples)
        except RolloutDivergenceError as exc:
            if best is None:
                raise
            # an unstable closed loop counts as a failed step
            log.info("outer %d: %s; shrinking step sizes", it, exc)
            history.append(OuterStep(
                it, mult.lam.copy(), mult.gamma.copy(), float("nan"), float("nan"),
                float("nan"), float("nan"), float("nan"), n_samples, False, eta1, eta2, 0, False,
            ))
            if callback is not None:
                callback(history[-1])
            eta1, eta2 = eta1 / 2, eta2 / 2
            mult = update_multipliers(best.mult, best.grads, eta1, eta2, opts.eps_pd)
            current = best
            continue
        V_lam, V_gamma = current.grads
        accepted = True
        res = residual_norms(current.moments, constraint)
        if best is not None and best.n_samples == n_samples and current.dual < best.dual - _dual_slack(current, best):
            # filter rule: a lower dual is still progress if the worst residual shrank
            accepted = (
                max(res) < max(residual_norms(best.moments, constraint))
                or (eta1 <= opts.eta_min and eta2 <= opts.eta_min)
            )
        step = OuterStep(
            it, mult.lam.copy(), mult.gamma.copy(), res[0], res[1],
            float(np.max(np.abs(V_lam))), float(np.max(np.abs(V_gamma))),
            current.dual, n_samples, accepted, eta1, eta2,
            current.diag.iterations, current.diag.converged,
        )
        history.append(step)
        if callback is not None:
            callback(step)
        log.debug(
            "outer %d: residuals %.4g %.4g dual %.6g n=%d %s",
            it, res[0], res[1], current.dual, n_samples, "accepted" if accepted else "rejected",
        )
        if not current.diag.converged:
            log.info("outer %d: SDDP stopped without converging (%s)", it, current.diag.reason)

        if not accepted:
            eta1, eta2 = eta1 / 2, eta2 / 2
            mult = update_multipliers(best.mult, best.grads, eta1, eta2, opts.eps_pd)
            continue

        if best is not None and best.n_samples == n_samples:
            # let the step sizes recover after a run of rejections
            eta1 = min(opts.eta1, eta1 * opts.eta_growth)
            eta2 = min(opts.eta2, eta2 * opts.eta_growth)
        best = current
        if max(step.grad_lam_norm, step.grad_gamma_norm) < opts.tol_constraint:
            converged = True
            break
        n_next = opts.samples_coarse if max(res) > opts.coarse_threshold else opts.samples_fine
        if n_next != n_samples:
            # dual estimates at different sample counts are not comparable
            n_samples = n_next
            current = evaluate(mult, best.traj.controls, n_samples)
            best = current
            counts.append(n_samples)
            if max(np.max(np.abs(current.grads[0])), np.max(np.abs(current.grads[1]))) < opts.tol_constraint:
                converged = True
                break
        mult = update_multipliers(best.mult, best.grads, eta1, eta2, opts.eps_pd)

    # the last accepted point: its residuals describe the returned policy
    final = best

    return CovControlResult(
        trajectory=final.traj,
        policy=final.policy,
        multipliers=final.mult,
        terminal_mean_est=final.moments.mean,
        terminal_cov_est=final.moments.covariance,
        constraint_residuals=residual_norms(final.moments, constraint),
        outer_iterations=len(history),
        sample_counts_used=counts,
        converged=converged,
        history=history,
        sddp_diagnostics=final.diag,
        moments=final.moments,
    )


def _dual_slack(a: _Eval, b: _Eval) -> float:
    """Standard error of the paired (common-noise) dual difference."""
    if a.dual_samples is None or b.dual_samples is None or a.dual_samples.size != b.dual_samples.size:
        return 0.0
    d = a.dual_samples - b.dual_samples
    return float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0


def _batch_seed(seed: int, n_samples: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(n_samples)]).generate_state(1, dtype=np.uint32)[0])


def _gaussian_dual(running_cost, policy, mt, mult, constraint, dt) -> float:
    """Expected Lagrangian under the Gaussian closure (exact for quadratic costs)."""
    Q, R = running_cost.Q, running_cost.R
    total = 0.0
    for i in range(policy.horizon):
        mu, S, K = mt.means[i], mt.covariances[i], policy.K[i]
        total += float(running_cost.rate(mu, mt.controls[i]))
        total += 0.5 * float(np.trace(Q @ S) + np.trace(R @ K @ S @ K.T))
    total *= dt
    mean, cov = mt.means[-1], mt.covariances[-1]
    total += float(terminal_cost_expansion(mult, constraint, mean)[0] + np.sum(mult.gamma * cov))
    return total
