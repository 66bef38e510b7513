import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imdiff.krylov import LinearOperator, bicgstab, check_linearity, conjugate_gradient, jacobi_iterate


def residual(A, x, b):
    return np.linalg.norm(A @ x - b)


def lap1d(n):
    # Dirichlet 1D Laplacian, SPD sign convention
    return 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)


def test_bicgstab_identity():
    b = np.array([3.0, -1.0, 2.5])
    x, rep = bicgstab(np.eye(3), b)
    np.testing.assert_allclose(x, b)
    assert rep.converged and rep.iterations <= 1


def test_bicgstab_diagonal():
    x, rep = bicgstab(np.diag([2.0, 4.0]), np.array([2.0, 8.0]))
    np.testing.assert_allclose(x, [1.0, 2.0], atol=1e-10)
    assert rep.converged


def test_cg_scaled_identity():
    x, rep = conjugate_gradient(2 * np.eye(2), np.array([4.0, 6.0]))
    np.testing.assert_allclose(x, [2.0, 3.0], atol=1e-12)


def test_cg_laplacian_matches_direct():
    A = lap1d(8)
    x, rep = conjugate_gradient(A, np.ones(8), tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(A, np.ones(8)), atol=1e-8)
    assert rep.converged


def test_cg_exact_start_zero_iterations():
    A = lap1d(8)
    xs = np.linalg.solve(A, np.ones(8))
    _, rep = conjugate_gradient(A, np.ones(8), x0=xs)
    assert rep.iterations == 0 and rep.converged


def test_jacobi_diagonal_one_iteration():
    d = np.array([2.0, 5.0, 4.0])
    x, rep = jacobi_iterate(d, lambda v: np.zeros_like(v), np.array([2.0, 10.0, 1.0]))
    np.testing.assert_allclose(x, [1.0, 2.0, 0.25])
    assert rep.iterations == 1


def test_jacobi_dominant_2x2():
    off = np.array([[0.0, 1.0], [1.0, 0.0]])
    x, rep = jacobi_iterate(np.array([4.0, 3.0]), lambda v: off @ v, np.array([1.0, 2.0]), tol=1e-12)
    np.testing.assert_allclose(x, [1 / 11, 7 / 11], atol=1e-11)
    assert rep.converged


def test_jacobi_zero_diagonal_rejected():
    with pytest.raises(ValueError, match="diagonal"):
        jacobi_iterate(np.array([1.0, 0.0]), lambda v: v, np.ones(2))


def test_jacobi_reports_non_convergence():
    # not diagonally dominant: iteration diverges
    off = np.array([[0.0, 3.0], [3.0, 0.0]])
    _, rep = jacobi_iterate(np.ones(2), lambda v: off @ v, np.ones(2), max_iter=50)
    assert not rep.converged and rep.iterations == 50


def test_solvers_only_touch_apply():
    A = lap1d(6) + np.diag(np.arange(6.0))
    calls = []

    def apply(v):
        calls.append(1)
        return A @ v

    op = LinearOperator(apply, 6)
    x, rep = bicgstab(op, np.ones(6), tol=1e-12)
    assert calls and rep.converged
    assert residual(A, x, np.ones(6)) <= 1e-12 * np.sqrt(6)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dim"):
        bicgstab(np.eye(3), np.ones(4))
    with pytest.raises(ValueError):
        conjugate_gradient(np.eye(3), np.ones(3), tol=0.0)


def test_operator_shape_checked():
    op = LinearOperator(lambda v: np.ones(2), 3)
    with pytest.raises(ValueError, match="shape"):
        op(np.ones(3))


def test_check_linearity():
    rng = np.random.default_rng(0)
    assert check_linearity(LinearOperator.from_matrix(rng.standard_normal((5, 5))), rng)
    assert not check_linearity(LinearOperator(lambda v: v ** 2, 5), rng)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_random_systems_match_dense(seed):
    rng = np.random.default_rng(seed)
    n = 16
    A = rng.standard_normal((n, n)) + n * np.eye(n)
    b = rng.standard_normal(n)
    ref = np.linalg.solve(A, b)
    x, rep = bicgstab(A, b, tol=1e-12)
    assert rep.converged
    assert rep.final_residual_norm <= 1e-12 * max(1, np.linalg.norm(b))
    assert residual(A, x, b) <= 1e-11 * max(1, np.linalg.norm(b))
    np.testing.assert_allclose(x, ref, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_cg_and_bicgstab_agree_on_spd(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((12, 12))
    A = M @ M.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    x1, r1 = conjugate_gradient(A, b, tol=1e-12)
    x2, r2 = bicgstab(A, b, tol=1e-12)
    assert r1.converged and r2.converged
    np.testing.assert_allclose(x1, x2, atol=1e-7)
