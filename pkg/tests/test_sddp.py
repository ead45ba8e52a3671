import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covsddp.costs import QuadraticCost
from covsddp.errors import RegularizationError, StructuralError
from covsddp.sddp import SDDPOptions, SDDPProblem, backward_pass, forward_pass, rollout_nominal, solve_sddp
from covsddp.sddp.solver import Policy, noise_penalty
from covsddp.systems import cosine1d_model, linear_model, pendulum_model, preset_double_integrator

from .conftest import riccati


def quad_terminal(P, target=None):
    P = np.asarray(P, dtype=float)
    t = np.zeros(P.shape[0]) if target is None else np.asarray(target, dtype=float)
    return lambda x: (0.5 * (x - t) @ P @ (x - t), P @ (x - t), P)


def double_integrator_problem(N=50, dt=0.1, kappa=0):
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    model = linear_model(A, B, np.zeros((2, 1)))
    cost = QuadraticCost(np.eye(2), 0.1 * np.eye(1))
    return SDDPProblem(model, cost, quad_terminal(np.eye(2)), [1.0, 0.0], N, dt, kappa), A, B


@pytest.mark.parametrize("kappa", [0, 1])
def test_double_integrator_matches_riccati(kappa):
    prob, A, B = double_integrator_problem(kappa=kappa)
    dt = prob.dt
    traj, policy, diag = solve_sddp(prob)
    Ad, Bd = np.eye(2) + A * dt, B * dt
    Ks, Ps = riccati(Ad, Bd, np.eye(2) * dt, 0.1 * np.eye(1) * dt, np.eye(2), prob.N)
    assert diag.converged and diag.iterations <= 2
    np.testing.assert_allclose(policy.K, Ks, atol=1e-8)
    opt_cost = 0.5 * prob.x0 @ Ps[0] @ prob.x0
    assert traj.cost == pytest.approx(opt_cost, abs=1e-8)


def test_zero_cost_problem_stays_put():
    model = cosine1d_model()
    zero = QuadraticCost(np.zeros((1, 1)), np.zeros((1, 1)) + 1e-12)
    prob = SDDPProblem(model, zero, lambda x: (0.0, np.zeros(1), np.zeros((1, 1))), [0.2], 20, 0.05)
    traj, policy, diag = solve_sddp(prob)
    assert diag.converged
    np.testing.assert_allclose(policy.k, 0.0, atol=1e-12)
    np.testing.assert_allclose(traj.controls, 0.0, atol=1e-12)


def test_forward_pass_fixed_points():
    prob, _, _ = double_integrator_problem(N=20)
    u = np.linspace(-1, 1, 20)[:, None]
    traj = rollout_nominal(prob, u)
    K = np.random.default_rng(1).normal(size=(20, 1, 2))
    zero_k = Policy(np.zeros((20, 1)), K, traj)
    out = forward_pass(prob, traj, zero_k, 1.0)
    np.testing.assert_allclose(out.states, traj.states, atol=1e-14)
    some_k = Policy(np.ones((20, 1)), K, traj)
    out = forward_pass(prob, traj, some_k, 0.0)
    np.testing.assert_allclose(out.controls, traj.controls, atol=1e-14)
    assert traj.consistency_error(prob.model) < 1e-14


def test_forward_pass_rejects_bad_alpha():
    prob, _, _ = double_integrator_problem(N=5)
    traj = rollout_nominal(prob, np.zeros((5, 1)))
    with pytest.raises(ValueError):
        forward_pass(prob, traj, Policy(np.zeros((5, 1)), np.zeros((5, 1, 2)), traj), 1.5)


def test_policy_shape_checked():
    prob, _, _ = double_integrator_problem(N=5)
    traj = rollout_nominal(prob, np.zeros((5, 1)))
    with pytest.raises(StructuralError):
        Policy(np.zeros((4, 1)), np.zeros((5, 1, 2)), traj)


def test_regularization_error_names_step():
    model = cosine1d_model()
    neg = QuadraticCost(np.zeros((1, 1)), -np.ones((1, 1)))
    prob = SDDPProblem(model, neg, quad_terminal([[0.0]]), [0.0], 10, 0.1)
    traj = rollout_nominal(prob, np.zeros((10, 1)))
    with pytest.raises(RegularizationError) as exc:
        backward_pass(prob, traj, reg_max=1e-3)
    assert exc.value.step == 9


def test_pendulum_quu_positive():
    model = pendulum_model()
    cost = QuadraticCost.control_only(2, [[0.02]])
    prob = SDDPProblem(model, cost, quad_terminal(np.eye(2), [0, 0]), [-np.pi, 0.0], 400, 0.01)
    traj = rollout_nominal(prob, np.zeros((400, 1)))
    bw = backward_pass(prob, traj)
    assert np.all(np.linalg.eigvalsh(bw.Quu) > 0)


def test_cosine_smoke():
    # lam = 0, gamma = 1: terminal cost is the second moment about the origin
    model = cosine1d_model()
    prob = SDDPProblem(model, QuadraticCost.control_only(1, [[2e-4]]), quad_terminal([[2.0]]), [0.0], 100, 0.01, 1)
    traj, policy, diag = solve_sddp(prob)
    assert diag.converged
    assert np.all(np.isfinite(policy.K))
    assert np.all(np.diff(diag.merit_history) <= 1e-12)
    assert abs(traj.states[-1, 0]) < abs(rollout_nominal(prob, np.zeros((100, 1))).states[-1, 0])


def test_noise_penalty_matches_hand_sum():
    model = cosine1d_model()
    prob = SDDPProblem(model, QuadraticCost.control_only(1, [[1.0]]), quad_terminal([[1.0]]), [0.5], 3, 0.1)
    traj = rollout_nominal(prob, np.zeros((3, 1)))
    Vxx = np.full((4, 1, 1), 2.0)
    hand = sum(0.5 * 0.1 * traj.states[i, 0] ** 4 * 2.0 for i in range(3))
    assert noise_penalty(prob, traj, Vxx) == pytest.approx(hand, rel=1e-14)


def test_iteration_cap_reported():
    model = pendulum_model()
    prob = SDDPProblem(model, QuadraticCost.control_only(2, [[0.02]]), quad_terminal(np.eye(2)), [-np.pi, 0], 100, 0.04)
    _, _, diag = solve_sddp(prob, options=SDDPOptions(max_iter=1))
    assert not diag.converged and diag.reason == "iteration cap" and diag.iterations == 1


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.sampled_from([0, 1]))
def test_backward_invariants(seed, kappa):
    rng = np.random.default_rng(seed)
    model = pendulum_model()
    prob = SDDPProblem(model, QuadraticCost.control_only(2, [[0.02]]), quad_terminal(np.eye(2)),
                       rng.uniform(-3, 3, 2), 30, 0.05, kappa)
    traj = rollout_nominal(prob, rng.normal(size=(30, 1)))
    bw = backward_pass(prob, traj)
    assert bw.expected_improvement >= -1e-12
    assert np.max(np.abs(bw.Vxx - np.swapaxes(bw.Vxx, 1, 2))) < 1e-10


def test_problem_validation():
    with pytest.raises(ValueError):
        SDDPProblem(cosine1d_model(), QuadraticCost.control_only(1, [[1.0]]), quad_terminal([[1.0]]), [0.0], 10, 0.1, 2)
    with pytest.raises(ValueError):
        SDDPProblem(cosine1d_model(), QuadraticCost.control_only(1, [[1.0]]), quad_terminal([[1.0]]), [0.0], 0, 0.1)


def test_preset_double_integrator_zero_noise():
    p = preset_double_integrator()
    assert p.N == 50
    np.testing.assert_array_equal(p.linear["F"], 0.0)
