"""Backward/forward passes and the fixed-multiplier SDDP loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..costs import QuadraticCost
from ..dynamics import ControlledSDE, LocalModel, discretize_linearize
from ..errors import (
    ModelEvaluationError,
    RegularizationError,
    RolloutDivergenceError,
    StructuralError,
)
from .expansion import ValueExpansion
from .kernels import get_backend, resolve_backend

TerminalFn = Callable[[np.ndarray], tuple]


@dataclass
class Trajectory:
    """Noise-free nominal: ``states`` is ``(N+1, n)``, ``controls`` is ``(N, m)``."""

    states: np.ndarray
    controls: np.ndarray
    dt: float
    cost: float = float("nan")

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def consistency_error(self, model: ControlledSDE) -> float:
        """Largest violation of ``x[i+1] = x[i] + f(x[i], u[i]) dt``."""
        pred = self.states[:-1] + model.f(self.states[:-1], self.controls) * self.dt
        return float(np.max(np.abs(pred - self.states[1:]), initial=0.0))


@dataclass
class Policy:
    """Affine feedback ``u = u_bar + k + K (x - x_bar)`` anchored to ``nominal``."""

    k: np.ndarray
    K: np.ndarray
    nominal: Trajectory

    def __post_init__(self):
        N = self.nominal.horizon
        n = self.nominal.states.shape[1]
        m = self.nominal.controls.shape[1]
        if self.k.shape != (N, m) or self.K.shape != (N, m, n):
            raise StructuralError(
                f"gains have shapes {self.k.shape}, {self.K.shape}; expected {(N, m)}, {(N, m, n)}"
            )

    @property
    def horizon(self) -> int:
        return self.nominal.horizon

    def feedback(self, i: int, x) -> np.ndarray:
        """Closed-loop control ``u_bar_i + K_i (x - x_bar_i)`` for a state or a batch."""
        dx = np.asarray(x, dtype=float) - self.nominal.states[i]
        return self.nominal.controls[i] + dx @ self.K[i].T

    def open_loop(self) -> "Policy":
        return Policy(self.k.copy(), np.zeros_like(self.K), self.nominal)


@dataclass
class SDDPProblem:
    model: ControlledSDE
    running_cost: QuadraticCost
    terminal: TerminalFn
    x0: np.ndarray
    N: int
    dt: float
    kappa: int = 0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.model.state_dim)
        if self.kappa not in (0, 1):
            raise ValueError("kappa must be 0 or 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.N) < 1:
            raise ValueError("N must be a positive integer")
        self.N = int(self.N)


@dataclass
class SDDPOptions:
    max_iter: int = 200
    tol_k: float = 1e-6
    tol_rel_cost: float = 1e-9
    reg_init: float = 0.0
    reg_min: float = 1e-6
    reg_max: float = 1e10
    reg_factor: float = 10.0
    reg_decay: float = 2.0
    max_halvings: int = 10
    backend: str = "auto"


@dataclass
class SDDPDiagnostics:
    converged: bool
    reason: str
    iterations: int
    accepted_steps: int
    cost_history: list = field(default_factory=list)
    merit_history: list = field(default_factory=list)
    k_max_history: list = field(default_factory=list)
    reg_history: list = field(default_factory=list)
    expected_improvement: float = 0.0
    backend: str = ""


@dataclass
class BackwardPassResult:
    policy: Policy
    expected_improvement: float
    reg: float
    V: np.ndarray
    Vx: np.ndarray
    Vxx: np.ndarray
    Quu: np.ndarray

    def value(self, i: int) -> ValueExpansion:
        return ValueExpansion(self.V[i], self.Vx[i], self.Vxx[i])


def rollout_nominal(problem: SDDPProblem, controls) -> Trajectory:
    """Integrate the noise-free dynamics from ``x0`` under ``controls``."""
    controls = np.asarray(controls, dtype=float).reshape(problem.N, problem.model.control_dim)
    x = np.empty((problem.N + 1, problem.model.state_dim))
    x[0] = problem.x0
    f = problem.model.f
    dt = problem.dt
    for i in range(problem.N):
        try:
            x[i + 1] = x[i] + f(x[i], controls[i]) * dt
        except ModelEvaluationError as exc:
            raise RolloutDivergenceError(str(exc), i) from exc
        if not np.all(np.isfinite(x[i + 1])):
            raise RolloutDivergenceError("non-finite nominal state", i + 1)
    return Trajectory(x, controls, dt, nominal_cost(problem, x, controls))


def nominal_cost(problem: SDDPProblem, states, controls) -> float:
    running = float(np.sum(problem.running_cost.rate(states[:-1], controls)) * problem.dt)
    return running + float(problem.terminal(states[-1])[0])


def noise_penalty(problem: SDDPProblem, traj: Trajectory, Vxx: np.ndarray) -> float:
    """``sum_i (dt/2) tr(F_i^T Vxx[i+1] F_i)`` along the nominal.

    Added to the nominal cost this is the second-order expected cost that
    the noise-corrected backward pass differentiates, with ``Vxx`` frozen.
    """
    F = problem.model.F(traj.states[:-1], traj.controls)
    return float(0.5 * problem.dt * np.einsum("iac,iab,ibc->", F, Vxx[1:], F))


def linearize_trajectory(problem: SDDPProblem, traj: Trajectory) -> LocalModel:
    return discretize_linearize(
        problem.model, traj.states[:-1], traj.controls, problem.dt, problem.kappa
    )


def _c(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=float)


def backward_pass(
    problem: SDDPProblem,
    traj: Trajectory,
    reg: float = 0.0,
    *,
    reg_min: float = 1e-6,
    reg_max: float = 1e10,
    reg_factor: float = 10.0,
    backend: str | None = None,
    local: Optional[LocalModel] = None,
) -> BackwardPassResult:
    """Noise-corrected backward recursion along ``traj``.

    ``Quu + reg I`` must be positive definite at every step; on a failed
    Cholesky factorization ``reg`` is raised (to at least ``reg_min``, then
    by ``reg_factor``) and the pass restarts.  Beyond ``reg_max`` a
    :class:`RegularizationError` names the failing step.
    """
    kernel = get_backend(backend)
    if local is None:
        local = linearize_trajectory(problem, traj)
    cost = problem.running_cost.derivatives(traj.states[:-1], traj.controls, problem.dt)
    vN, gN, HN = problem.terminal(traj.states[-1])
    use_second = problem.kappa == 1
    if use_second:
        fxx, fuu, fux = (_c(t) for t in local.second_order)
    else:
        fxx = fuu = fux = None
    args = (
        _c(local.A), _c(local.B), _c(local.Gamma0), _c(local.Gamma_dx), _c(local.Gamma_du),
        _c(cost.l), _c(cost.lx), _c(cost.lu), _c(cost.lxx), _c(cost.luu), _c(cost.lux),
        fxx, fuu, fux,
        float(vN), _c(gN), _c(HN),
    )
    mu = float(reg)
    while True:
        fail, k, K, V, Vx, Vxx, Quu, dV1, dV2 = kernel(*args, mu, float(problem.dt), use_second)
        if fail < 0:
            break
        mu = max(mu * reg_factor, reg_min)
        if mu > reg_max:
            raise RegularizationError("Quu + reg*I not positive definite", int(fail), mu)
    return BackwardPassResult(
        Policy(k, K, traj), -(dV1 + dV2), mu, V, Vx, Vxx, Quu
    )


def forward_pass(problem: SDDPProblem, traj: Trajectory, policy: Policy, alpha: float = 1.0) -> Trajectory:
    """New nominal under ``u = u_bar + alpha k + K (x - x_bar)``, noise-free."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    N = problem.N
    x = np.empty_like(traj.states)
    u = np.empty_like(traj.controls)
    x[0] = problem.x0
    f = problem.model.f
    dt = problem.dt
    for i in range(N):
        u[i] = traj.controls[i] + alpha * policy.k[i] + policy.K[i] @ (x[i] - traj.states[i])
        try:
            x[i + 1] = x[i] + f(x[i], u[i]) * dt
        except ModelEvaluationError as exc:
            raise RolloutDivergenceError(str(exc), i) from exc
        if not np.all(np.isfinite(x[i + 1])):
            raise RolloutDivergenceError("non-finite state in forward pass", i + 1)
    return Trajectory(x, u, dt, nominal_cost(problem, x, u))


def solve_sddp(problem: SDDPProblem, u_init=None, options: SDDPOptions | None = None):
    """Iterate backward and forward passes for fixed terminal cost.

    Steps are accepted by backtracking (``alpha = 1, 1/2, ... 2**-max_halvings``)
    on the nominal cost plus :func:`noise_penalty`.  Stops when the largest
    feedforward entry drops below ``tol_k``, when the relative merit change
    drops below ``tol_rel_cost``, or at ``max_iter`` (reported, not raised).

    Returns ``(trajectory, policy, diagnostics)``.
    """
    opts = options or SDDPOptions()
    m = problem.model.control_dim
    if u_init is None:
        u_init = np.zeros((problem.N, m))
    traj = rollout_nominal(problem, u_init)
    reg = opts.reg_init
    diag = SDDPDiagnostics(False, "iteration cap", 0, 0, backend=resolve_backend(opts.backend))
    alphas = 0.5 ** np.arange(opts.max_halvings + 1)

    def backward(t, r):
        return backward_pass(
            problem, t, r,
            reg_min=opts.reg_min, reg_max=opts.reg_max, reg_factor=opts.reg_factor,
            backend=opts.backend,
        )

    bw = None
    while diag.iterations < opts.max_iter:
        bw = backward(traj, reg)
        reg = bw.reg
        diag.iterations += 1
        k_max = float(np.max(np.abs(bw.policy.k), initial=0.0))
        merit = traj.cost + noise_penalty(problem, traj, bw.Vxx)
        diag.k_max_history.append(k_max)
        diag.cost_history.append(traj.cost)
        diag.merit_history.append(merit)
        diag.reg_history.append(reg)
        diag.expected_improvement = bw.expected_improvement
        if k_max < opts.tol_k:
            diag.converged, diag.reason = True, "feedforward below tolerance"
            break

        accepted = None
        for alpha in alphas:
            try:
                cand = forward_pass(problem, traj, bw.policy, float(alpha))
            except RolloutDivergenceError:
                continue
            cand_merit = cand.cost + noise_penalty(problem, cand, bw.Vxx)
            if cand_merit < merit:
                accepted = (cand, cand_merit)
                break
        if accepted is None:
            reg = max(reg * opts.reg_factor, opts.reg_min)
            if reg > opts.reg_max:
                diag.reason = "line search failed at maximum regularization"
                break
            continue

        traj, new_merit = accepted
        diag.accepted_steps += 1
        reg = reg / opts.reg_decay
        if reg < opts.reg_min:
            reg = 0.0
        if abs(merit - new_merit) <= opts.tol_rel_cost * max(abs(merit), 1e-12):
            bw = backward(traj, reg)
            diag.iterations += 1
            diag.converged, diag.reason = True, "relative cost change below tolerance"
            break

    if bw is None or bw.policy.nominal is not traj:
        bw = backward(traj, reg)
    diag.expected_improvement = bw.expected_improvement
    return traj, bw.policy, diag
