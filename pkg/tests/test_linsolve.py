import numpy as np
import pytest

from mmc_tdgl.grid import Grid2D, lap
from mmc_tdgl.linsolve import (
    LinearOperator,
    SolverError,
    cg,
    cgnr,
    gmres,
    jacobian_vector,
    solve,
    weighted_norm,
)

from oracles import dense_ops


def shifted_laplacian(g, nu):
    return LinearOperator(lambda v: v - nu * lap(v, g.hx, g.hy), symmetric_hint=True)


def dense_shifted_laplacian(g, nu):
    _, _, L = dense_ops(g.nx, g.ny, g.hx, g.hy)
    return np.eye(g.nx * g.ny) - nu * L


def matrix_op(M, shape):
    return LinearOperator(lambda v: (M @ v.ravel()).reshape(shape))


def test_identity_one_iteration(rng):
    b = rng.normal(size=(4, 4))
    x, stats = cg(LinearOperator(lambda v: v.copy(), True), b)
    assert stats.iterations == 1 and stats.converged
    np.testing.assert_allclose(x, b, rtol=0, atol=1e-15)


def test_zero_rhs():
    b = np.zeros((8, 8))
    A = shifted_laplacian(Grid2D(8, 8), 0.1)
    x, stats = cg(A, b, np.zeros_like(b))
    assert stats.iterations == 0 and stats.converged
    assert np.all(x == 0)
    x, stats = cgnr(A, A, b)
    assert stats.iterations == 0 and np.all(x == 0)


def test_cg_matches_dense_solve(rng):
    g = Grid2D(8, 8)
    b = rng.normal(size=g.shape)
    x, stats = cg(shifted_laplacian(g, 0.1), b, tol=1e-12, cell_area=g.cell_area)
    ref = np.linalg.solve(dense_shifted_laplacian(g, 0.1), b.ravel()).reshape(g.shape)
    assert stats.converged
    assert weighted_norm(x - ref, g.cell_area) <= 1e-8


def test_cg_residuals_decrease_on_spd(rng):
    # on an SPD operator CG minimises the A-norm of the error over growing subspaces
    g = Grid2D(8, 8)
    M = dense_shifted_laplacian(g, 0.1)
    b = rng.normal(size=g.shape)
    ref = np.linalg.solve(M, b.ravel())
    errs = []
    for k in range(1, 12):
        try:
            x, _ = cg(matrix_op(M, g.shape), b, tol=1e-14, maxit=k)
        except SolverError as err:
            x = err.x
        e = x.ravel() - ref
        errs.append(float(e @ M @ e))
    assert all(b_ <= a_ * (1 + 1e-12) for a_, b_ in zip(errs, errs[1:]))


def test_converged_implies_residual_below_tolerance(rng):
    g = Grid2D(8, 8)
    A = shifted_laplacian(g, 0.3)
    b = 5 * rng.normal(size=g.shape)
    x, stats = cg(A, b, tol=1e-6, cell_area=g.cell_area)
    true = weighted_norm(b - A(x), g.cell_area)
    assert stats.converged
    assert true <= 1e-6 * max(1.0, weighted_norm(b, g.cell_area))
    assert stats.final_residual_norm == pytest.approx(true)


def test_absolute_mode_is_stricter_for_large_rhs(rng):
    g = Grid2D(8, 8)
    A = shifted_laplacian(g, 0.3)
    b = 1e3 * rng.normal(size=g.shape)
    _, rel = cg(A, b, tol=1e-6, cell_area=g.cell_area)
    _, ab = cg(A, b, tol=1e-6, cell_area=g.cell_area, mode="absolute")
    assert ab.final_residual_norm <= 1e-6
    assert ab.iterations >= rel.iterations


def test_cg_maxit_error_carries_stats(rng):
    g = Grid2D(8, 8)
    with pytest.raises(SolverError) as info:
        cg(shifted_laplacian(g, 1.0), rng.normal(size=g.shape), tol=1e-14, maxit=2)
    assert info.value.stats.iterations == 2
    assert not info.value.stats.converged
    assert info.value.x is not None


def test_cg_rejects_bad_arguments():
    A = LinearOperator(lambda v: v)
    with pytest.raises(ValueError):
        cg(A, np.ones(4), tol=0)
    with pytest.raises(ValueError):
        cg(A, np.ones(4), maxit=0)


def test_cgnr_agrees_with_cg_on_symmetric(rng):
    g = Grid2D(8, 8)
    A = shifted_laplacian(g, 0.1)
    b = rng.normal(size=g.shape)
    x1, _ = cg(A, b, tol=1e-12, cell_area=g.cell_area)
    x2, s2 = cgnr(A, A, b, tol=1e-12, cell_area=g.cell_area)
    assert s2.method == "cgnr"
    assert weighted_norm(x1 - x2, g.cell_area) <= 1e-8


def test_cgnr_nonsymmetric_dense(rng):
    n = 16
    M = np.eye(n) + 0.2 * rng.normal(size=(n, n)) / np.sqrt(n)
    b = rng.normal(size=(4, 4))
    x, stats = cgnr(matrix_op(M, (4, 4)), matrix_op(M.T, (4, 4)), b, tol=1e-13)
    ref = np.linalg.solve(M, b.ravel()).reshape(4, 4)
    assert stats.converged
    np.testing.assert_allclose(x, ref, atol=1e-10)


def test_gmres_nonsymmetric_dense(rng):
    n = 16
    M = np.eye(n) + 0.2 * rng.normal(size=(n, n)) / np.sqrt(n)
    b = rng.normal(size=(4, 4))
    x, stats = gmres(matrix_op(M, (4, 4)), b, tol=1e-13)
    np.testing.assert_allclose(x, np.linalg.solve(M, b.ravel()).reshape(4, 4), atol=1e-10)
    assert stats.method == "gmres"


def test_solve_falls_back_on_indefinite(rng):
    # indefinite symmetric operator: p.Ap <= 0 trips cg, cgnr recovers
    d = np.concatenate([np.linspace(1, 2, 8), -np.linspace(1, 2, 8)])
    M = np.diag(d)
    b = rng.normal(size=(4, 4))
    op = matrix_op(M, (4, 4))
    with pytest.raises(SolverError):
        cg(op, b, tol=1e-10)
    x, stats = solve(op, b, tol=1e-10, At=op)
    assert stats.fallback_used and stats.method == "cgnr"
    np.testing.assert_allclose(x.ravel(), b.ravel() / d, atol=1e-9)
    x, stats = solve(op, b, tol=1e-10)
    assert stats.fallback_used and stats.method == "gmres"
    np.testing.assert_allclose(x.ravel(), b.ravel() / d, atol=1e-9)


def test_solve_uses_cg_when_it_works(rng):
    g = Grid2D(8, 8)
    A = shifted_laplacian(g, 0.1)
    _, stats = solve(A, rng.normal(size=g.shape), At=A, cell_area=g.cell_area)
    assert stats.method == "cg" and not stats.fallback_used


def test_operator_linearity(rng):
    g = Grid2D(8, 6, 1.0, 2.0)
    A = shifted_laplacian(g, 0.7)
    f, h = rng.normal(size=g.shape), rng.normal(size=g.shape)
    a, c = 1.7, -0.3
    np.testing.assert_allclose(A(a * f + c * h), a * A(f) + c * A(h), atol=1e-12)


def test_solves_are_bit_identical(rng):
    g = Grid2D(16, 16)
    A = shifted_laplacian(g, 0.2)
    b = rng.normal(size=g.shape)
    x1, s1 = cg(A, b, tol=1e-10, cell_area=g.cell_area)
    x2, s2 = cg(A, b, tol=1e-10, cell_area=g.cell_area)
    assert np.array_equal(x1, x2) and s1 == s2


def test_jvp_of_linear_map(rng):
    g = Grid2D(8, 8)
    A = shifted_laplacian(g, 0.1)
    x, v = rng.normal(size=g.shape), rng.normal(size=g.shape)
    np.testing.assert_allclose(jacobian_vector(A, x, v, cell_area=g.cell_area), A(v), atol=1e-8)


def test_jvp_of_square(rng):
    x, v = rng.uniform(0.5, 1.5, (4, 4)), rng.normal(size=(4, 4))
    np.testing.assert_allclose(jacobian_vector(lambda y: y * y, x, v), 2 * x * v, atol=1e-6)


def test_jvp_zero_direction(rng):
    out = jacobian_vector(lambda y: y**3, rng.normal(size=(4, 4)), np.zeros((4, 4)))
    assert np.all(out == 0)


def test_jvp_scale_invariance(rng):
    # the step is scaled by ||v||, so J(c v) = c J(v) up to truncation
    x, v = rng.uniform(0.5, 1.5, (4, 4)), rng.normal(size=(4, 4))
    R = lambda y: np.sin(y)  # noqa: E731
    a = jacobian_vector(R, x, 1e-5 * v)
    b = jacobian_vector(R, x, v)
    np.testing.assert_allclose(a, 1e-5 * b, rtol=1e-8, atol=1e-18)


def test_jvp_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        jacobian_vector(lambda y: y, np.ones(4), np.ones(4), eps=0.0)


def test_cgnr_unreachable_tolerance_fails_cleanly(rng):
    n = 16
    M = np.eye(n) * 1e4 + rng.normal(size=(n, n))
    b = 1e4 * rng.normal(size=(4, 4))
    with pytest.raises(SolverError) as info:
        cgnr(matrix_op(M, (4, 4)), matrix_op(M.T, (4, 4)), b, tol=1e-30, mode="absolute")
    stats = info.value.stats
    assert np.isfinite(stats.final_residual_norm)
    assert stats.final_residual_norm < 1e-6 * weighted_norm(b)
