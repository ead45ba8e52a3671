import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covsddp.covcon import (
    CovControlOptions,
    Multipliers,
    TerminalConstraint,
    multiplier_gradients,
    project_pd,
    residual_norms,
    solve_covariance_control,
    terminal_cost_expansion,
    terminal_cost_values,
    update_multipliers,
)
from covsddp.errors import StructuralError
from covsddp.rollout import estimate_moments, sample_closed_loop
from covsddp.systems import linear_moments, preset_linear_gaussian

from .conftest import riccati

c1 = TerminalConstraint([0.0], [[0.03]])


def test_terminal_cost_zero_multipliers():
    v, g, H = terminal_cost_expansion(Multipliers(np.zeros(2), np.zeros((2, 2))), TerminalConstraint([1, 2], np.eye(2)), [3.0, -1.0])
    assert v == 0.0
    np.testing.assert_array_equal(g, 0.0)
    np.testing.assert_array_equal(H, 0.0)


def test_terminal_cost_scalar_example():
    v, g, H = terminal_cost_expansion(Multipliers([2.0], [[3.0]]), c1, [0.5])
    assert v == pytest.approx(1.66, abs=1e-14)
    assert g[0] == pytest.approx(5.0) and H[0, 0] == 6.0


def test_terminal_cost_at_target_with_zero_covariance():
    c = TerminalConstraint([0.4, -0.2], 1e-12 * np.eye(2))
    v, _, _ = terminal_cost_expansion(Multipliers([1.0, 2.0], np.eye(2)), c, [0.4, -0.2])
    assert v == pytest.approx(0.0, abs=1e-11)


def test_terminal_cost_rejects_asymmetric_gamma():
    with pytest.raises(StructuralError):
        terminal_cost_expansion(Multipliers(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]]), TerminalConstraint([0, 0], np.eye(2)), [0.0, 0.0])


@given(st.integers(0, 10_000))
def test_terminal_cost_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(3, 3))
    mult = Multipliers(rng.normal(size=3), G + G.T)
    c = TerminalConstraint(rng.normal(size=3), np.eye(3) * 0.1)
    x = rng.normal(size=3)
    v, g, H = terminal_cost_expansion(mult, c, x)
    h = 1e-5
    E = np.eye(3)
    fd_g = np.array([(terminal_cost_expansion(mult, c, x + h * e)[0] - terminal_cost_expansion(mult, c, x - h * e)[0]) / (2 * h) for e in E])
    fd_H = np.array([(terminal_cost_expansion(mult, c, x + h * e)[1] - terminal_cost_expansion(mult, c, x - h * e)[1]) / (2 * h) for e in E])
    np.testing.assert_allclose(g, fd_g, atol=1e-7)
    np.testing.assert_allclose(H, fd_H, atol=1e-7)
    assert terminal_cost_values(mult, c, x[None])[0] == pytest.approx(v, rel=1e-12)


def test_gradient_examples():
    c2 = TerminalConstraint([0.5, -1.0], [[0.2, 0.05], [0.05, 0.1]])
    V_lam, V_gam = multiplier_gradients((c2.mu_T, c2.second_moment), c2)
    np.testing.assert_allclose(V_lam, 0.0, atol=1e-15)
    np.testing.assert_allclose(V_gam, 0.0, atol=1e-15)
    V_lam, V_gam = multiplier_gradients(([0.1], [[0.05]]), c1)
    assert V_lam[0] == pytest.approx(0.1) and V_gam[0, 0] == pytest.approx(0.02)
    est = estimate_moments(np.tile(c2.mu_T, (10, 1)))
    V_lam, V_gam = multiplier_gradients(est, c2)
    np.testing.assert_allclose(V_lam, 0.0, atol=1e-15)
    np.testing.assert_allclose(V_gam, -c2.Sigma_T, atol=1e-14)


def test_update_examples():
    m = Multipliers([1.0, -1.0], np.eye(2))
    same = update_multipliers(m, (np.zeros(2), np.zeros((2, 2))), 0.5, 0.5)
    np.testing.assert_array_equal(same.lam, m.lam)
    np.testing.assert_array_equal(same.gamma, m.gamma)
    out = update_multipliers(Multipliers([0.0], [[0.5]]), (np.zeros(1), [[-1.0]]), 0.5, 1.0)
    assert out.gamma[0, 0] == pytest.approx(1e-6)
    out = update_multipliers(m, (np.zeros(2), np.diag([1.0, -0.5])), 0.5, 0.5)
    np.testing.assert_allclose(out.gamma, np.diag([1.5, 0.75]), atol=1e-15)
    with pytest.raises(ValueError):
        update_multipliers(m, (np.zeros(2), np.zeros((2, 2))), 1.5, 0.5)


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_projection_is_pd_and_idempotent(seed, eta):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(3, 3))
    out = update_multipliers(Multipliers(np.zeros(3), 1e-3 * np.eye(3)), (np.zeros(3), G), eta, eta)
    assert np.linalg.eigvalsh(out.gamma).min() >= 1e-6 * (1 - 1e-9)
    np.testing.assert_array_equal(out.gamma, out.gamma.T)
    np.testing.assert_allclose(project_pd(out.gamma), out.gamma, atol=1e-15)


def _lq():
    return preset_linear_gaussian(seed=1)


def test_ascent_direction_on_frozen_policy():
    # the Lagrangian of a fixed policy is affine in the multipliers, with slope (V_lam, V_gamma)
    p = _lq()
    opts = p.options(estimator="gaussian", max_outer=1)
    res = solve_covariance_control(p.model, p.running_cost, p.init, p.constraint, opts)
    batch = sample_closed_loop(p.model, res.policy, p.init, 500, 1)
    est = estimate_moments(batch)
    grads = multiplier_gradients(est, p.constraint)
    new = update_multipliers(res.multipliers, grads, 0.1, 0.1)
    before = terminal_cost_values(res.multipliers, p.constraint, batch.terminal_states).mean()
    after = terminal_cost_values(new, p.constraint, batch.terminal_states).mean()
    slope = 0.1 * (grads[0] @ grads[0] + np.sum(grads[1] * (new.gamma - res.multipliers.gamma) / 0.1))
    assert after - before == pytest.approx(slope, rel=1e-9)
    assert after >= before


def test_gamma_stays_pd_along_the_ascent():
    p = _lq()
    eigs = []
    opts = p.options(estimator="gaussian", max_outer=40)
    solve_covariance_control(p.model, p.running_cost, p.init, p.constraint, opts,
                             callback=lambda s: eigs.append(np.linalg.eigvalsh(s.gamma).min()))
    assert eigs and min(eigs) > 0


def test_lq_matches_riccati_oracle():
    p = _lq()
    res = solve_covariance_control(p.model, p.running_cost, p.init, p.constraint, p.options(estimator="gaussian"))
    assert res.converged
    lin = p.linear
    Ad = np.eye(2) + lin["A"] * p.dt
    Bd = lin["B"] * p.dt
    Ks, _ = riccati(Ad, Bd, p.running_cost.Q * p.dt, p.running_cost.R * p.dt, 2 * res.multipliers.gamma, p.N)
    np.testing.assert_allclose(res.policy.K, Ks, atol=1e-6)
    S = p.init.Sigma_0.copy()
    for i in range(p.N):
        Acl = Ad + Bd @ Ks[i]
        S = Acl @ S @ Acl.T + lin["F"] @ lin["F"].T * p.dt
    assert np.max(np.abs(S - p.constraint.Sigma_T)) < 0.01
    exact = linear_moments(p, res.policy)
    assert np.max(np.abs(exact.means[-1] - p.constraint.mu_T)) < 0.01


def test_already_satisfied_constraint():
    p = _lq()
    eps = 1e-6
    probe = solve_covariance_control(
        p.model, p.running_cost, p.init, p.constraint,
        p.options(estimator="gaussian", max_outer=1, gamma0=eps * np.eye(2)),
    )
    target = TerminalConstraint(probe.terminal_mean_est, probe.terminal_cov_est)
    res = solve_covariance_control(
        p.model, p.running_cost, p.init, target,
        p.options(estimator="gaussian", max_outer=5, gamma0=eps * np.eye(2)),
    )
    assert res.converged and res.outer_iterations <= 2
    np.testing.assert_allclose(res.multipliers.lam, 0.0, atol=1e-6)
    np.testing.assert_allclose(res.multipliers.gamma, eps * np.eye(2), atol=1e-6)


def test_residual_norms():
    est = estimate_moments(np.array([[0.0], [0.2]]))
    mr, cr = residual_norms(est, c1)
    assert mr == pytest.approx(0.1) and cr == pytest.approx(0.02)


@pytest.mark.parametrize("bad", [dict(eta1=2.0), dict(kappa=3), dict(estimator="x"), dict(max_outer=0), dict(tol_constraint=0)])
def test_option_validation(bad):
    with pytest.raises(ValueError):
        CovControlOptions(N=10, dt=0.1, **bad)
