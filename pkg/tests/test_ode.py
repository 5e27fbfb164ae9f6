import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from eqexplore.ode import IntegrationDiverged, TimeGrid, finite_diff_jacobian, integrate, rk4_step


def const(v):
    return lambda t, x: np.asarray(v, float) + 0.0 * x


def test_zero_field_is_identity():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(rk4_step(const([0.0, 0.0]), 0.0, x, 0.1), x)


def test_nilpotent_field_matches_matrix_exponential():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    x = np.array([0.0, 1.0])
    got = rk4_step(lambda t, z: A @ z, 0.0, x, 0.1)
    np.testing.assert_allclose(got, expm(0.1 * A) @ x, atol=1e-15)
    np.testing.assert_allclose(got, [0.1, 1.0], atol=1e-15)


def test_exponential_decay():
    X = integrate(lambda t, x: -x, TimeGrid(0.0, 0.01, 100), [1.0])
    assert abs(X[-1, 0] - np.exp(-1.0)) < 1e-8


def test_constant_and_affine_fields():
    X = integrate(const([0.0]), TimeGrid(0.0, 0.3, 7), [5.0])
    assert np.all(X == 5.0)
    X = integrate(const([1.0]), TimeGrid(0.0, 0.1, 10), [0.0])
    assert X[-1, 0] == pytest.approx(1.0, abs=1e-14)


def test_free_fall():
    X = integrate(lambda t, x: np.array([x[1], -9.81]), TimeGrid(0.0, 0.01, 100), [0.0, 0.0])
    np.testing.assert_allclose(X[-1], [-4.905, -9.81], atol=1e-9)


def test_integrate_returns_initial_state_exactly():
    x0 = np.array([0.1, np.pi, -3.0])
    X = integrate(lambda t, x: np.sin(x) * t, TimeGrid(0.5, 0.05, 13), x0)
    assert X.shape == (14, 3)
    assert np.array_equal(X[0], x0)


def test_grid_points_do_not_drift():
    grid = TimeGrid(0.1, 0.01, 100_000)
    assert grid.time(100_000) == 0.1 + 100_000 * 0.01
    assert grid.times[-1] == grid.t_end
    assert len(grid) == 100_001


@pytest.mark.parametrize("dt, n", [(0.0, 1), (-0.1, 3), (0.1, 0)])
def test_grid_rejects_bad_arguments(dt, n):
    with pytest.raises(ValueError):
        TimeGrid(0.0, dt, n)


def test_divergence_reports_step_and_time():
    with pytest.raises(IntegrationDiverged) as info, np.errstate(over="ignore", invalid="ignore"):
        integrate(lambda t, x: x ** 3, TimeGrid(0.0, 0.5, 40), [10.0])
    assert info.value.step is not None
    assert info.value.t == pytest.approx(0.5 * info.value.step)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_rk4_matches_expm_on_random_stable_systems(n):
    rng = np.random.default_rng(n)
    for _ in range(10):
        A = rng.standard_normal((n, n))
        A -= (np.max(np.linalg.eigvals(A).real) + 0.5) * np.eye(n)
        dt = 0.09 / np.linalg.norm(A, 2)
        x = rng.standard_normal(n)
        got = rk4_step(lambda t, z: A @ z, 0.0, x, dt)
        want = expm(A * dt) @ x
        assert np.linalg.norm(got - want) < 1e-6 * np.linalg.norm(want)


def test_integrate_is_deterministic():
    field = lambda t, x: np.array([x[1], -np.sin(x[0]) + 0.1 * np.cos(3 * t)])
    grid = TimeGrid(0.0, 0.01, 500)
    a = integrate(field, grid, [1.0, 0.0])
    b = integrate(field, grid, [1.0, 0.0])
    assert a.tobytes() == b.tobytes()


def test_jacobian_examples():
    np.testing.assert_allclose(finite_diff_jacobian(lambda x: x, np.array([0.3, -2.0, 7.0])), np.eye(3), atol=1e-10)
    J = finite_diff_jacobian(lambda x: np.array([x[0] ** 2, x[0] * x[1]]), np.array([2.0, 3.0]), 1e-5)
    np.testing.assert_allclose(J, [[4.0, 0.0], [3.0, 2.0]], atol=1e-6)
    np.testing.assert_array_equal(finite_diff_jacobian(lambda x: np.ones(2), np.zeros(3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        finite_diff_jacobian(lambda x: x, np.zeros(2), 0.0)


@given(st.integers(1, 6), st.integers(1, 6), st.floats(1e-7, 1e-4), st.integers(0, 2 ** 31))
def test_jacobian_recovers_linear_maps(rows, cols, eps, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((rows, cols))
    x = rng.standard_normal(cols)
    # central differences of a linear map are exact up to rounding of x + eps and of M @ z
    roundoff = 4 * np.finfo(float).eps * (1 + np.max(np.abs(x))) * np.max(np.abs(M).sum(1)) / eps
    assert np.max(np.abs(finite_diff_jacobian(lambda z: M @ z, x, eps) - M)) < max(1e-9, roundoff)
