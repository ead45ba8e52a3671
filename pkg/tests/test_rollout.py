import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covsddp.costs import QuadraticCost
from covsddp.dynamics import ControlledSDE
from covsddp.errors import EstimationError, RolloutDivergenceError
from covsddp.rollout import (
    InitialCondition,
    draw_standard_normals,
    estimate_moments,
    gaussian_terminal_estimate,
    propagate_moments_gaussian,
    sample_closed_loop,
    sample_stream,
)
from covsddp.sddp import SDDPProblem, rollout_nominal
from covsddp.sddp.solver import Policy
from covsddp.systems import cosine1d_model, linear_moments, preset_linear_gaussian


def nominal_policy(model, x0, N, dt, K=None, u=None):
    n, m = model.state_dim, model.control_dim
    prob = SDDPProblem(model, QuadraticCost(np.zeros((n, n)), np.eye(m)),
                       lambda x: (0.0, np.zeros(n), np.zeros((n, n))), x0, N, dt)
    traj = rollout_nominal(prob, np.zeros((N, m)) if u is None else u)
    return Policy(np.zeros((N, m)), np.zeros((N, m, n)) if K is None else K, traj)


def lq_setup(seed=0, T=1.0):
    p = preset_linear_gaussian(seed=seed, T=T)
    rng = np.random.default_rng(seed + 100)
    K = -0.5 * rng.uniform(size=(p.N, 1, 2))
    u = 0.3 * rng.normal(size=(p.N, 1))
    return p, nominal_policy(p.model, p.init.mu_0, p.N, p.dt, K, u)


def test_two_point_example():
    est = estimate_moments(np.array([[0.0], [2.0]]))
    assert est.mean[0] == 1.0 and est.covariance[0, 0] == 1.0 and est.second_moment[0, 0] == 2.0


def test_identical_samples_have_zero_covariance():
    est = estimate_moments(np.tile([1.5, -2.0], (10, 1)))
    np.testing.assert_array_equal(est.covariance, 0.0)
    np.testing.assert_array_equal(est.std_error_mean, 0.0)


def test_standard_normal_example():
    X = draw_standard_normals(3, 100_000, 1)
    est = estimate_moments(X)
    assert abs(est.mean[0]) < 3 / np.sqrt(1e5)
    assert abs(est.covariance[0, 0] - 1) < 0.015


def test_single_sample_rejected():
    with pytest.raises(EstimationError):
        estimate_moments(np.zeros((1, 2)))


def test_streams_are_per_sample():
    X = draw_standard_normals(11, 50, 4)
    np.testing.assert_array_equal(X[:20], draw_standard_normals(11, 20, 4))
    np.testing.assert_array_equal(X[37], sample_stream(11, 37).standard_normal(4))


def test_open_loop_linear_covariance_within_se():
    # x' = Phi x + noise: Sigma_N = Phi^N Sigma_0 Phi^N' + sum Phi^j FF' dt Phi^j'
    p, _ = lq_setup()
    pol = nominal_policy(p.model, p.init.mu_0, p.N, p.dt)
    Phi = np.eye(2) + p.linear["A"] * p.dt
    S = p.init.Sigma_0.copy()
    for _ in range(p.N):
        S = Phi @ S @ Phi.T + p.linear["F"] @ p.linear["F"].T * p.dt
    est = estimate_moments(sample_closed_loop(p.model, pol, p.init, 20_000, 5))
    assert np.all(np.abs(est.covariance - S) < 4 * est.std_error_cov)


def test_gaussian_closure_exact_for_linear():
    p, pol = lq_setup()
    a = propagate_moments_gaussian(p.model, pol, p.init)
    b = linear_moments(p, pol)
    np.testing.assert_allclose(a.means, b.means, atol=1e-10)
    np.testing.assert_allclose(a.covariances, b.covariances, atol=1e-10)
    g = gaussian_terminal_estimate(a)
    np.testing.assert_allclose(g.second_moment, g.covariance + np.outer(g.mean, g.mean))


def test_bit_identical_and_order_independent():
    p, pol = lq_setup()
    a = sample_closed_loop(p.model, pol, p.init, 300, 9, keep_paths=True)
    b = sample_closed_loop(p.model, pol, p.init, 300, 9, keep_paths=True)
    np.testing.assert_array_equal(a.full_paths, b.full_paths)
    c = sample_closed_loop(p.model, pol, p.init, 100, 9)
    np.testing.assert_array_equal(a.terminal_states[:100], c.terminal_states)
    d = sample_closed_loop(p.model, pol, p.init, 300, 10)
    assert not np.array_equal(a.terminal_states, d.terminal_states)


def test_standard_error_scales_as_inverse_sqrt():
    p, pol = lq_setup()
    se = [estimate_moments(sample_closed_loop(p.model, pol, p.init, n, 1)).std_error_mean for n in (1000, 4000)]
    ratio = se[0] / se[1]
    assert np.all(np.abs(ratio - 2.0) < 0.4)


def test_estimator_unbiased_over_seeds():
    p, pol = lq_setup(T=0.5)
    exact = linear_moments(p, pol)
    mu, S = exact.means[-1], exact.covariances[-1]
    n = 200
    means, covs = [], []
    for seed in range(50):
        est = estimate_moments(sample_closed_loop(p.model, pol, p.init, n, seed))
        means.append(est.mean)
        covs.append(est.covariance * n / (n - 1))
    means, covs = np.array(means), np.array(covs)
    assert np.all(np.abs(means.mean(0) - mu) < 3 * means.std(0, ddof=1) / np.sqrt(50))
    assert np.all(np.abs(covs.mean(0) - S) < 3 * covs.std(0, ddof=1) / np.sqrt(50) + 1e-12)


def test_cosine_gaussian_closure_close_to_monte_carlo():
    model = cosine1d_model()
    init = InitialCondition([0.3], [[0.01]])
    pol = nominal_policy(model, [0.3], 20, 0.01, K=np.full((20, 1, 1), -1.0))
    g = gaussian_terminal_estimate(propagate_moments_gaussian(model, pol, init))
    est = estimate_moments(sample_closed_loop(model, pol, init, 10_000, 2))
    assert abs(g.mean[0] - est.mean[0]) < 4 * est.std_error_mean[0] + 1e-3
    assert abs(g.covariance[0, 0] - est.covariance[0, 0]) < 4 * est.std_error_cov[0, 0] + 1e-3


def test_feedback_reduces_variance():
    # unstable scalar system; stabilizing feedback shrinks the spread on common noise
    from covsddp.systems import linear_model

    model = linear_model([[1.0]], [[1.0]], [[0.5]])
    init = InitialCondition([0.0], [[0.1]])
    open_loop = nominal_policy(model, [0.0], 100, 0.01)
    closed = nominal_policy(model, [0.0], 100, 0.01, K=np.full((100, 1, 1), -3.0))
    v_open = estimate_moments(sample_closed_loop(model, open_loop, init, 2000, 4)).covariance[0, 0]
    v_closed = estimate_moments(sample_closed_loop(model, closed, init, 2000, 4)).covariance[0, 0]
    assert v_closed < v_open


def _cliff_model(edge):
    return ControlledSDE(
        1, 1, 1,
        drift=lambda x, u: np.where(x > edge, np.inf, 0.0),
        diffusion=lambda x, u: np.zeros(x.shape + (1,)),
    )


def test_divergence_above_one_percent_raises():
    init = InitialCondition([0.0], [[1.0]])
    model = _cliff_model(2.0)
    pol = nominal_policy(_cliff_model(1e9), [0.0], 2, 0.1)
    with pytest.raises(RolloutDivergenceError):
        sample_closed_loop(model, pol, init, 10_000, 0)


def test_divergence_below_one_percent_dropped():
    init = InitialCondition([0.0], [[1.0]])
    pol = nominal_policy(_cliff_model(1e9), [0.0], 2, 0.1)
    batch = sample_closed_loop(_cliff_model(3.0), pol, init, 10_000, 0)
    assert 0 < batch.n_diverged <= 100
    assert batch.n_samples == 10_000 - batch.n_diverged
    assert np.all(np.isfinite(batch.terminal_states))


def test_running_costs_recorded():
    model = cosine1d_model()
    init = InitialCondition([0.0], [[0.0]])
    pol = nominal_policy(model, [0.0], 10, 0.1, u=np.ones((10, 1)))
    batch = sample_closed_loop(model, pol, init, 5, 0, running_cost=QuadraticCost.control_only(1, [[2.0]]))
    np.testing.assert_allclose(batch.running_costs, 1.0, rtol=1e-12)


@settings(max_examples=20)
@given(st.integers(2, 50), st.integers(0, 1000))
def test_covariance_symmetric_psd(n, seed):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    est = estimate_moments(X)
    np.testing.assert_array_equal(est.covariance, est.covariance.T)
    assert np.linalg.eigvalsh(est.covariance).min() > -1e-12


def test_initial_condition_validation():
    with pytest.raises(ValueError):
        InitialCondition([0.0, 0.0], [[1.0]])
    with pytest.raises(ValueError):
        InitialCondition([0.0], [[-1.0]])
