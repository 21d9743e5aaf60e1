from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import merton_case
from fbsde_equilibrium.adjoint import (
    DriverCoefficients,
    compute_kappa,
    eval_driver_G,
    eval_driver_g,
    inhomogeneity_G0,
    solve_adjoints,
    solve_candidate,
)
from fbsde_equilibrium.model import (
    CoefficientBundle,
    ControlDomain,
    ControlPath,
    ProblemError,
    StateDomain,
    build_problem,
    constant_policy,
)
from fbsde_equilibrium.sde import generate_brownian

BOX = ControlDomain((-1.0, 0.0), (1.0, 1.0))
finite = st.floats(-10, 10)


def toy_problem(grid, f, h, b=None, sigma=None):
    zero = lambda s, x, u: np.zeros(np.shape(x))
    bundle = CoefficientBundle(b or zero, sigma or zero, f, h)
    return build_problem(bundle, grid, BOX, StateDomain(), 1.0)


def toy_tuple(problem, n_paths=200, seed=0, **kw):
    ens = generate_brownian(problem.grid, n_paths, seed, antithetic=True)
    return solve_candidate(problem, constant_policy([0.5, 0.5]), ens, **kw)


def test_g_zero_coefficients():
    assert eval_driver_g(3.0, -2.0, DriverCoefficients()) == 0.0


def test_g_hand_value():
    c = DriverCoefficients(b_x=0.1, sigma_x=0.2, f_y=-0.3, f_z=0.4, f_x=0.05)
    assert eval_driver_g(2.0, 1.0, c) == pytest.approx(0.41, abs=1e-14)


def test_g_at_zero_adjoint_is_fx():
    c = DriverCoefficients(b_x=0.1, sigma_x=0.2, f_y=-0.3, f_z=0.4, f_x=0.05)
    assert eval_driver_g(0.0, 0.0, c) == 0.05


@given(finite, finite, finite, finite, finite, finite, finite)
def test_g_is_affine(p1, q1, p2, q2, bx, sx, fz):
    c = DriverCoefficients(b_x=bx, sigma_x=sx, f_y=-0.3, f_z=fz, f_x=0.7)
    lhs = eval_driver_g(p1 + p2, q1 + q2, c) - c.f_x
    rhs = (eval_driver_g(p1, q1, c) - c.f_x) + (eval_driver_g(p2, q2, c) - c.f_x)
    assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))


def test_G_zero_coefficients():
    assert eval_driver_G(1.0, 2.0, 3.0, 4.0, DriverCoefficients()) == 0.0


def test_G_identity_hessian():
    c = DriverCoefficients(sigma_x=0.5, f_hess=np.eye(3))
    # v = (1, p, sigma_x p + q) = (1, 1, 1); the sigma_x^2 P and 2 sigma_x Q terms vanish
    assert eval_driver_G(0.0, 0.0, 1.0, 0.5, c) == pytest.approx(3.0)


def test_G_linear_part():
    c = DriverCoefficients(b_x=0.1, sigma_x=0.2)
    assert eval_driver_G(1.0, 0.0, 0.0, 0.0, c) == pytest.approx(0.24, abs=1e-14)


@given(finite, finite, finite, finite)
def test_G_hessian_form_matches_matrix_product(p, q, sx, a):
    rng = np.random.default_rng(abs(int(a * 1000)))
    m = rng.standard_normal((3, 3))
    hess = m + m.T
    c = DriverCoefficients(sigma_x=sx, f_hess=hess)
    v = np.array([1.0, p, sx * p + q])
    expected = v @ hess @ v
    got = eval_driver_G(0.0, 0.0, p, q, c)
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_kappa_is_one_without_y_z_dependence(grid20):
    f = lambda s, x, u, y, z, t: x * u[..., 1]
    tup = toy_tuple(toy_problem(grid20, f, lambda x, t: x))
    np.testing.assert_array_equal(compute_kappa(tup).values, 1.0)


def test_kappa_deterministic_exponential(grid100):
    f = lambda s, x, u, y, z, t: -0.1 * y
    tup = toy_tuple(toy_problem(grid100, f, lambda x, t: x))
    kap = compute_kappa(tup)
    # f_y comes from finite differences
    np.testing.assert_allclose(kap.values[-1], np.exp(-0.1), rtol=1e-9)
    assert kap.min > 0


def test_kappa_positive_on_recursive_preset(grid20):
    _, problem, policy = merton_case("merton_recursive_beta_gamma", grid20)
    ens = generate_brownian(grid20, 2000, seed=1)
    assert compute_kappa(solve_candidate(problem, policy, ens)).min > 0


def test_first_adjoint_linear_terminal(grid20):
    f = lambda s, x, u, y, z, t: np.zeros(np.shape(x))
    adj = solve_adjoints(toy_tuple(toy_problem(grid20, f, lambda x, t: 2.5 * x)))
    np.testing.assert_allclose(adj.p, 2.5, atol=1e-12)
    np.testing.assert_allclose(adj.q, 0.0, atol=1e-12)
    np.testing.assert_allclose(adj.P, 0.0, atol=1e-12)
    np.testing.assert_allclose(adj.Q, 0.0, atol=1e-12)


def test_first_adjoint_unit_source(grid20):
    f = lambda s, x, u, y, z, t: x
    adj = solve_adjoints(toy_tuple(toy_problem(grid20, f, lambda x, t: np.zeros(np.shape(x)))))
    assert adj.p0 == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(adj.p[:, 0], 1.0 - grid20.knots, atol=1e-9)


def test_second_adjoint_constant_source(grid20):
    # f = c x^2 / 2 has f_xx = c and f_x = c x; every homogeneous coefficient is zero
    c = 0.8
    f = lambda s, x, u, y, z, t: 0.5 * c * x * x
    tup = toy_tuple(toy_problem(grid20, f, lambda x, t: np.zeros(np.shape(x))))
    adj = solve_adjoints(tup)
    np.testing.assert_allclose(inhomogeneity_G0(tup, adj), c, rtol=1e-6)
    assert adj.P0 == pytest.approx(c * 1.0, rel=1e-6)


def test_terminal_values_bit_exact(baseline20):
    _, problem, policy = baseline20
    ens = generate_brownian(problem.grid, 2000, seed=3)
    tup = solve_candidate(problem, policy, ens)
    adj = solve_adjoints(tup)
    b = problem.bundle
    np.testing.assert_array_equal(adj.p[-1], b.h_x(tup.X[-1], 0.0))
    np.testing.assert_array_equal(adj.P[-1], b.h_xx(tup.X[-1], 0.0))


def test_baseline_adjoints_match_oracle(baseline100):
    # frozen from tests/oracles.py: p(0;0) = -a(0), P(0;0) = a(0) / 2 with a(0) = 1.33004892
    _, problem, policy = baseline100
    ens = generate_brownian(problem.grid, 20_000, seed=4, antithetic=True)
    tup = solve_candidate(problem, policy, ens)
    adj = solve_adjoints(tup)
    assert adj.method_first == adj.method_second == "explicit"
    assert adj.p0 == pytest.approx(-1.33004892, rel=0.01)
    assert adj.P0 == pytest.approx(0.66502446, rel=0.02)
    assert tup.utility.Y0 == pytest.approx(-2.66009784, rel=0.01)


def test_regression_adjoints_close_to_explicit(baseline20):
    _, problem, policy = baseline20
    ens = generate_brownian(problem.grid, 20_000, seed=4, antithetic=True)
    tup = solve_candidate(problem, policy, ens)
    a = solve_adjoints(tup)
    b = solve_adjoints(tup, method="regression")
    assert b.p0 == pytest.approx(a.p0, rel=0.02)
    assert b.P0 == pytest.approx(a.P0, rel=0.05)


def test_explicit_method_needs_affine_driver(grid20):
    f = lambda s, x, u, y, z, t: y * y
    problem = toy_problem(grid20, f, lambda x, t: x)
    with pytest.raises(ProblemError):
        toy_tuple(problem, method="explicit")


def test_unknown_quadrature(grid20):
    f = lambda s, x, u, y, z, t: x
    with pytest.raises(ValueError):
        toy_tuple(toy_problem(grid20, f, lambda x, t: x), quadrature="simpson")


def test_open_loop_control_has_no_policy(grid20):
    f = lambda s, x, u, y, z, t: x
    problem = toy_problem(grid20, f, lambda x, t: x)
    ens = generate_brownian(grid20, 10, 0)
    tup = solve_candidate(problem, ControlPath.constant([0.1, 0.1], 21, 10), ens)
    assert tup.policy is None
