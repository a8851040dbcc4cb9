import numpy as np
import pytest

from icegcomp.logistic import expit
from icegcomp.mest import (ConvergenceFailure, EstimatingSystem, SingularBread, SolveConfig, bread,
                           m_estimate, meat, numerical_jacobian, sandwich_variance,
                           solve_estimating_equations, wald_ci)


def mean_system(y):
    y = np.asarray(y, dtype=float)
    return EstimatingSystem(lambda t: (y - t[0])[None, :], n=y.size, v=1, names=["mu"])


def logistic_system(X, y):
    return EstimatingSystem(lambda b: (X * (y - expit(X @ b))[:, None]).T, n=X.shape[0], v=X.shape[1])


def test_sample_mean_hand_values():
    fit = m_estimate(mean_system([1, 2, 3]), [0.0])
    assert fit.theta[0] == pytest.approx(2.0, abs=1e-9)
    assert fit.sandwich.bread[0, 0] == pytest.approx(1.0, abs=1e-9)
    assert fit.sandwich.meat[0, 0] == pytest.approx(2 / 3, abs=1e-12)
    assert fit.standard_errors[0] == pytest.approx(np.sqrt(2 / 9), abs=1e-9)


def test_jacobian_of_linear_and_quadratic_systems():
    y = np.array([1.0, 2.0, 3.0, 7.0])
    assert numerical_jacobian(mean_system(y), [0.3])[0, 0] == pytest.approx(-4.0, rel=1e-9)
    quad = EstimatingSystem(lambda t: (t[0] ** 2 - y)[None, :], n=4, v=1)
    assert numerical_jacobian(quad, [2.0])[0, 0] == pytest.approx(16.0, rel=1e-8)


def test_logistic_jacobian_matches_hessian():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
    y = rng.binomial(1, 0.4, 200).astype(float)
    beta = rng.normal(size=3)
    p = expit(X @ beta)
    hessian = -(X * (p * (1 - p))[:, None]).T @ X
    jac = numerical_jacobian(logistic_system(X, y), beta)
    np.testing.assert_allclose(jac, hessian, rtol=1e-6)


def test_sandwich_identity_bread_returns_meat():
    F = np.array([[2.0, 0.5], [0.5, 1.0]])
    res = sandwich_variance(np.eye(2), F, n=10)
    np.testing.assert_allclose(res.covariance, F)
    np.testing.assert_allclose(res.standard_errors, np.sqrt(np.diag(F) / 10))


def test_sandwich_is_symmetric():
    rng = np.random.default_rng(1)
    B = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    G = rng.normal(size=(4, 4))
    res = sandwich_variance(B, G @ G.T, n=50)
    np.testing.assert_array_equal(res.covariance, res.covariance.T)


def test_singular_bread_raises():
    with pytest.raises(SingularBread):
        sandwich_variance(np.array([[1.0, 1.0], [1.0, 1.0]]), np.eye(2), n=5)


def test_wald_interval():
    lo, hi = wald_ci(0.5, 0.1)
    assert lo == pytest.approx(0.304, abs=5e-4)
    assert hi == pytest.approx(0.696, abs=5e-4)
    assert wald_ci(0.3, 0.0) == (0.3, 0.3)
    with pytest.raises(ValueError):
        wald_ci(0.3, -1.0)


def test_meat_and_bread_invariant_to_unit_order():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(150), rng.normal(size=150)])
    y = rng.binomial(1, 0.5, 150).astype(float)
    perm = rng.permutation(150)
    a = m_estimate(logistic_system(X, y), np.zeros(2))
    b = m_estimate(logistic_system(X[perm], y[perm]), np.zeros(2))
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-10)
    np.testing.assert_allclose(a.variance, b.variance, rtol=1e-6)


def test_solver_reports_residual_within_tolerance():
    rng = np.random.default_rng(8)
    X = np.column_stack([np.ones(300), rng.normal(size=300)])
    y = rng.binomial(1, expit(0.2 + X[:, 1])).astype(float)
    root = solve_estimating_equations(logistic_system(X, y), np.zeros(2))
    assert root.residual <= 1e-9
    assert np.max(np.abs(logistic_system(X, y).mean_psi(root.theta))) == pytest.approx(root.residual)


def test_system_without_root_fails():
    system = EstimatingSystem(lambda t: np.full((1, 3), t[0] ** 2 + 1.0), n=3, v=1)
    with pytest.raises(ConvergenceFailure) as info:
        solve_estimating_equations(system, [1.0], SolveConfig(max_iterations=200))
    assert info.value.theta is not None


def test_iteration_cap_raises():
    y = np.array([1.0, 2.0])
    slow = EstimatingSystem(lambda t: (np.tanh(t[0] - y) * 1e-3)[None, :], n=2, v=1)
    with pytest.raises(ConvergenceFailure):
        solve_estimating_equations(slow, [50.0], SolveConfig(max_iterations=1))


def test_psi_shape_checked():
    bad = EstimatingSystem(lambda t: np.zeros((2, 3)), n=3, v=1)
    with pytest.raises(ValueError):
        bad.evaluate([0.0])


def test_meat_symmetrized_outer_product():
    y = np.array([0.0, 1.0, 5.0])
    F = meat(mean_system(y), np.array([2.0]))
    assert F[0, 0] == pytest.approx(np.mean((y - 2.0) ** 2))
    assert bread(mean_system(y), np.array([2.0]))[0, 0] == pytest.approx(1.0)


def test_solve_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SolveConfig(root_tolerance=0.0)
    steps = SolveConfig().fd_steps(np.array([0.0, 1e3]))
    np.testing.assert_allclose(steps, [1e-6, 1e-3])
