import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from covsddp.costs import QuadraticCost
from covsddp.dynamics import LocalModel, discretize_linearize
from covsddp.errors import StructuralError
from covsddp.sddp.expansion import ValueExpansion, noise_corrections, q_expansion, value_update
from covsddp.systems import cosine1d_model

from .conftest import riccati


def random_local(rng, n, m, p, dt=0.05, scale=1.0):
    return LocalModel(
        A=np.eye(n) + dt * rng.normal(size=(n, n)),
        B=dt * rng.normal(size=(n, m)),
        Gamma0=scale * rng.normal(size=(n, p)),
        Gamma_dx=scale * rng.normal(size=(p, n, n)),
        Gamma_du=scale * rng.normal(size=(p, n, m)),
        dt=dt,
    )


def random_value(rng, n):
    W = rng.normal(size=(n, n))
    return ValueExpansion(rng.normal(), rng.normal(size=n), W @ W.T + 0.1 * np.eye(n))


def zero_cost(n, m, dt):
    return QuadraticCost(np.zeros((n, n)), np.zeros((m, m))).derivatives(np.zeros(n), np.zeros(m), dt)


def test_hand_contraction_cosine():
    loc = discretize_linearize(cosine1d_model(), [1.0], [0.0], 0.01)
    c = noise_corrections(loc, ValueExpansion(0.0, [0.0], [[2.0]]), 0.01)
    assert c.M_tilde[0, 0] == pytest.approx(0.08, abs=1e-15)
    assert c.S_tilde[0] == pytest.approx(0.04, abs=1e-15)


def test_zero_diffusion_gives_zero_corrections(rng):
    loc = random_local(rng, 3, 2, 2, scale=0.0)
    c = noise_corrections(loc, random_value(rng, 3), loc.dt)
    for arr in (c.S_tilde, c.U_tilde, c.M_tilde, c.N_tilde, c.G_tilde, c.F_tilde, c.L_tilde, c.Z_tilde):
        np.testing.assert_array_equal(arr, 0.0)
    assert c.V_tilde == 0.0


def test_zero_curvature_gives_zero_corrections(rng):
    loc = random_local(rng, 2, 2, 3)
    c = noise_corrections(loc, ValueExpansion(1.0, np.ones(2), np.zeros((2, 2))), loc.dt)
    for arr in (c.S_tilde, c.U_tilde, c.M_tilde, c.N_tilde, c.G_tilde):
        np.testing.assert_array_equal(arr, 0.0)


@given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 3), st.integers(0, 10_000))
def test_corrections_equal_exact_expectation(n, m, p, seed):
    # E[1/2 (G xi)^T W (G xi)] = dt/2 tr(G^T W G) for xi ~ N(0, dt I), G affine in (dx, du)
    rng = np.random.default_rng(seed)
    loc = random_local(rng, n, m, p)
    V = random_value(rng, n)
    c = noise_corrections(loc, V, loc.dt)
    dx, du = rng.normal(size=n), rng.normal(size=m)
    G = loc.gamma_at(dx, du)
    exact = 0.5 * loc.dt * np.trace(G.T @ V.Vxx @ G)
    model = (
        c.V_tilde + c.S_tilde @ dx + c.U_tilde @ du
        + 0.5 * dx @ c.M_tilde @ dx + 0.5 * du @ c.G_tilde @ du + dx @ c.N_tilde @ du
    )
    assert model == pytest.approx(exact, rel=1e-10, abs=1e-12)


@given(st.integers(0, 10_000))
def test_corrections_linear_in_dt(seed):
    rng = np.random.default_rng(seed)
    loc = random_local(rng, 2, 1, 2)
    V = random_value(rng, 2)
    c1 = noise_corrections(loc, V, 0.02)
    c2 = noise_corrections(loc, V, 0.01)
    for name in ("S_tilde", "U_tilde", "M_tilde", "N_tilde", "G_tilde", "V_tilde"):
        np.testing.assert_allclose(getattr(c2, name), 0.5 * getattr(c1, name), rtol=1e-12, atol=1e-15)


def test_corrections_dimension_mismatch(rng):
    loc = random_local(rng, 2, 1, 1)
    with pytest.raises(StructuralError):
        noise_corrections(loc, random_value(rng, 3), loc.dt)


def test_quu_is_control_cost_for_zero_dynamics(rng):
    dt = 0.1
    R = np.array([[2.0, 0.3], [0.3, 1.0]])
    loc = LocalModel(np.eye(2), np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), dt)
    cost = QuadraticCost(np.zeros((2, 2)), R).derivatives(np.zeros(2), np.zeros(2), dt)
    Q = q_expansion(loc, cost, random_value(rng, 2))
    np.testing.assert_allclose(Q.Quu, R * dt)


@pytest.mark.parametrize("kappa", [0, 1])
def test_lq_step_matches_riccati(rng, kappa):
    n, m, dt = 3, 2, 0.1
    Ac = rng.normal(size=(n, n))
    Bc = rng.normal(size=(n, m))
    Qc, Rc = np.eye(n), 0.5 * np.eye(m)
    A, B = np.eye(n) + Ac * dt, Bc * dt
    P = np.eye(n) * 2.0
    loc = LocalModel(A, B, np.zeros((n, 1)), np.zeros((1, n, n)), np.zeros((1, n, m)), dt,
                     (np.zeros((n, n, n)), np.zeros((n, m, m)), np.zeros((n, m, n))))
    cost = QuadraticCost(Qc, Rc).derivatives(np.zeros(n), np.zeros(m), dt)
    Q = q_expansion(loc, cost, ValueExpansion(0.0, np.zeros(n), P), kappa=kappa)
    k, K, V, _ = value_update(Q)
    Ks, Ps = riccati(A, B, Qc * dt, Rc * dt, P, 1)
    np.testing.assert_allclose(K, Ks[0], atol=1e-12)
    np.testing.assert_allclose(V.Vxx, Ps[0], atol=1e-12)
    np.testing.assert_allclose(k, 0.0, atol=1e-15)


def test_value_update_matches_grid_search():
    # one-step scalar problem: V(0) = min_u Q(0, u) under the quadratic model
    loc = discretize_linearize(cosine1d_model(), [0.4], [0.3], 0.05)
    cost = QuadraticCost([[0.5]], [[0.2]]).derivatives(np.array([0.4]), np.array([0.3]), 0.05)
    V_next = ValueExpansion(0.7, [0.9], [[1.5]])
    Q = q_expansion(loc, cost, V_next)
    k, K, V, _ = value_update(Q)
    grid = np.linspace(-5, 5, 2_000_001)
    vals = Q.Q0 + Q.Qu[0] * grid + 0.5 * Q.Quu[0, 0] * grid**2
    assert V.V == pytest.approx(vals.min(), abs=1e-6)
    assert k[0] == pytest.approx(grid[np.argmin(vals)], abs=1e-5)


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_value_update_symmetric_and_improving(n, m, seed):
    rng = np.random.default_rng(seed)
    loc = random_local(rng, n, m, 2)
    cost = QuadraticCost(np.eye(n), np.eye(m)).derivatives(rng.normal(size=n), rng.normal(size=m), loc.dt)
    Q = q_expansion(loc, cost, random_value(rng, n))
    k, K, V, (dV1, dV2) = value_update(Q)
    assert np.max(np.abs(V.Vxx - V.Vxx.T)) < 1e-10
    assert -(dV1 + dV2) >= -1e-14
    # the gains minimize the Q model in du for every dx
    dx = rng.normal(size=n)
    du = k + K @ dx
    for _ in range(5):
        assert Q(dx, du) <= Q(dx, du + 1e-3 * rng.normal(size=m)) + 1e-12


def test_value_update_rejects_indefinite(rng):
    loc = random_local(rng, 2, 1, 1, scale=0.0)
    cost = QuadraticCost(np.eye(2), [[-1.0]]).derivatives(np.zeros(2), np.zeros(1), loc.dt)
    Q = q_expansion(loc, cost, ValueExpansion(0.0, np.zeros(2), np.zeros((2, 2))))
    with pytest.raises(np.linalg.LinAlgError):
        value_update(Q)
    value_update(Q, mu=1.0)


def test_kappa_requires_second_order(rng):
    loc = random_local(rng, 2, 1, 1)
    with pytest.raises(StructuralError):
        q_expansion(loc, zero_cost(2, 1, loc.dt), random_value(rng, 2), kappa=1)


def test_cosine_one_step_monte_carlo():
    # terminal cost x^2 / 2 one step ahead, perturbation 0.05 in x and u
    model, dt = cosine1d_model(), 0.01
    xb, ub = np.array([0.5]), np.array([0.2])
    loc = discretize_linearize(model, xb, ub, dt, kappa=1)
    x_next = xb + model.f(xb, ub) * dt
    Q = q_expansion(loc, zero_cost(1, 1, dt), ValueExpansion(0.5 * x_next[0] ** 2, x_next, [[1.0]]), kappa=1)
    dx = du = 0.05
    pred = Q([dx], [du])
    rng = np.random.default_rng(7)
    x, u = xb[0] + dx, ub[0] + du
    xi = rng.normal(scale=np.sqrt(dt), size=1_000_000)
    vals = 0.5 * (x + (np.cos(x) + u) * dt + x**2 * xi) ** 2
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(pred - vals.mean()) < 3 * se
