"""Matrix-free Krylov solvers on node-value arrays.

Vectors are plain ``ndarray`` objects of any fixed shape. Norms are the
discrete L2 norm ``sqrt(sum(v*v) * cell_area)``, with sums taken in
row-major order so repeated solves are bit-identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mmc_tdgl._kernels import seq_dot

log = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class LinearOperator:
    apply: Callable[[Array], Array]
    symmetric_hint: bool = False

    def __call__(self, v: Array) -> Array:
        return self.apply(v)


@dataclass
class SolveStats:
    iterations: int = 0
    final_residual_norm: float = 0.0
    converged: bool = False
    fallback_used: bool = False
    method: str = "cg"


class SolverError(RuntimeError):
    def __init__(self, message: str, stats: SolveStats, x: Array | None = None):
        super().__init__(message)
        self.stats = stats
        self.x = x


def _dot(a: Array, b: Array) -> float:
    return seq_dot(a.ravel(), b.ravel())


def weighted_norm(v: Array, cell_area: float = 1.0) -> float:
    return float(np.sqrt(_dot(v, v) * cell_area))


def _threshold(b: Array, tol: float, cell_area: float, mode: str) -> float:
    if mode == "absolute":
        return tol
    if mode == "relative":
        return tol * max(1.0, weighted_norm(b, cell_area))
    raise ValueError(f"unknown tolerance mode {mode!r}")


def cg(
    A: LinearOperator,
    b: Array,
    x0: Array | None = None,
    tol: float = 1e-6,
    maxit: int | None = None,
    *,
    cell_area: float = 1.0,
    mode: str = "relative",
    threshold: float | None = None,
    stall_window: int = 100,
) -> tuple[Array, SolveStats]:
    """Conjugate gradients; stops when ``||b - A x||_h <= tol * max(1, ||b||_h)``.

    ``mode="absolute"`` drops the ``max(1, ||b||_h)`` factor. A precomputed
    ``threshold`` overrides both. Raises :class:`SolverError` on breakdown,
    stagnation, or when ``maxit`` is exhausted.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if maxit is None:
        maxit = 10 * b.size
    if maxit < 1:
        raise ValueError("maxit must be >= 1")
    thresh = threshold if threshold is not None else _threshold(b, tol, cell_area, mode)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    r = b - A(x) if x0 is not None else b.copy()
    rr = _dot(r, r)
    rnorm = np.sqrt(rr * cell_area)
    stats = SolveStats(0, float(rnorm), False, False, "cg")
    if rnorm <= thresh:
        stats.converged = True
        return x, stats

    p = r.copy()
    best = rnorm
    best_it = 0
    it = 0
    while it < maxit:
        Ap = A(p)
        pAp = _dot(p, Ap)
        if not pAp > 0:
            stats.iterations = it
            stats.final_residual_norm = float(rnorm)
            raise SolverError(f"cg breakdown: p.Ap = {pAp:.3e} at iteration {it}", stats, x)
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = _dot(r, r)
        it += 1
        rnorm = np.sqrt(rr_new * cell_area)
        if rnorm <= thresh:
            # guard against drift of the recursive residual
            r = b - A(x)
            rr_new = _dot(r, r)
            rnorm = np.sqrt(rr_new * cell_area)
            if rnorm <= thresh:
                stats.iterations = it
                stats.final_residual_norm = float(rnorm)
                stats.converged = True
                return x, stats
            p = r.copy()
            rr = rr_new
            continue
        if rnorm < best * 0.999:
            best, best_it = rnorm, it
        elif it - best_it > stall_window:
            stats.iterations = it
            stats.final_residual_norm = float(rnorm)
            raise SolverError(f"cg stagnated at residual {rnorm:.3e} (target {thresh:.3e})", stats, x)
        beta = rr_new / rr
        rr = rr_new
        p *= beta
        p += r
    stats.iterations = it
    stats.final_residual_norm = float(rnorm)
    raise SolverError(f"cg did not converge in {maxit} iterations (residual {rnorm:.3e})", stats, x)


def cgnr(
    A: LinearOperator,
    At: LinearOperator,
    b: Array,
    x0: Array | None = None,
    tol: float = 1e-6,
    maxit: int | None = None,
    *,
    cell_area: float = 1.0,
    mode: str = "relative",
    threshold: float | None = None,
    stall_window: int = 100,
) -> tuple[Array, SolveStats]:
    """CG on the normal equations A^T A x = A^T b, tested on the residual of A x = b."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if maxit is None:
        maxit = 10 * b.size
    thresh = threshold if threshold is not None else _threshold(b, tol, cell_area, mode)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    r = b - A(x) if x0 is not None else b.copy()
    rnorm = weighted_norm(r, cell_area)
    stats = SolveStats(0, rnorm, False, False, "cgnr")
    if rnorm <= thresh:
        stats.converged = True
        return x, stats
    z = At(r)
    p = z.copy()
    zz = _dot(z, z)
    best = rnorm
    best_it = 0
    it = 0
    while it < maxit:
        w = A(p)
        ww = _dot(w, w)
        if not ww > 0:
            break
        alpha = zz / ww
        x += alpha * p
        r -= alpha * w
        it += 1
        rnorm = weighted_norm(r, cell_area)
        if rnorm <= thresh:
            r = b - A(x)
            rnorm = weighted_norm(r, cell_area)
            if rnorm <= thresh:
                stats.iterations = it
                stats.final_residual_norm = rnorm
                stats.converged = True
                return x, stats
            # recursive residual drifted: restart from the true one
            z = At(r)
            p = z.copy()
            zz = _dot(z, z)
            continue
        if rnorm < best * 0.999:
            best, best_it = rnorm, it
        elif it - best_it > stall_window:
            break
        z = At(r)
        zz_new = _dot(z, z)
        p *= zz_new / zz
        p += z
        zz = zz_new
    stats.iterations = it
    stats.final_residual_norm = rnorm
    raise SolverError(f"cgnr did not converge in {it} iterations (residual {rnorm:.3e}, "
                      f"target {thresh:.3e})", stats, x)


def gmres(
    A: LinearOperator,
    b: Array,
    x0: Array | None = None,
    tol: float = 1e-6,
    maxit: int | None = None,
    *,
    cell_area: float = 1.0,
    mode: str = "relative",
    threshold: float | None = None,
    restart: int = 50,
) -> tuple[Array, SolveStats]:
    """Restarted GMRES (scipy) for operators without an available transpose."""
    from scipy.sparse.linalg import LinearOperator as SpOp
    from scipy.sparse.linalg import gmres as sp_gmres

    if maxit is None:
        maxit = 10 * b.size
    thresh = threshold if threshold is not None else _threshold(b, tol, cell_area, mode)
    shape = b.shape
    n = b.size
    op = SpOp((n, n), matvec=lambda v: A(v.reshape(shape)).ravel(), dtype=np.float64)
    counter = [0]

    def cb(_):
        counter[0] += 1

    guess = None if x0 is None else np.asarray(x0, dtype=np.float64).ravel()
    atol = thresh / np.sqrt(cell_area)
    sol, _info = sp_gmres(
        op, b.ravel(), x0=guess, rtol=0.0, atol=atol, restart=restart,
        maxiter=max(1, maxit // restart), callback=cb, callback_type="pr_norm",
    )
    x = sol.reshape(shape)
    rnorm = weighted_norm(b - A(x), cell_area)
    stats = SolveStats(counter[0], rnorm, rnorm <= thresh, False, "gmres")
    if not stats.converged:
        raise SolverError(f"gmres did not converge (residual {rnorm:.3e})", stats, x)
    return x, stats


def solve(
    A: LinearOperator,
    b: Array,
    x0: Array | None = None,
    tol: float = 1e-6,
    maxit: int | None = None,
    *,
    At: LinearOperator | None = None,
    cell_area: float = 1.0,
    mode: str = "relative",
    threshold: float | None = None,
) -> tuple[Array, SolveStats]:
    """CG first; on failure retry with CGNR (if ``At`` is given) or GMRES."""
    if threshold is None:
        threshold = _threshold(b, tol, cell_area, mode)
    try:
        return cg(A, b, x0, tol, maxit, cell_area=cell_area, threshold=threshold)
    except SolverError as err:
        log.debug("cg failed (%s); falling back", err)
        first = err.stats
    if At is not None:
        x, stats = cgnr(A, At, b, x0, tol, maxit, cell_area=cell_area, threshold=threshold)
    else:
        x, stats = gmres(A, b, x0, tol, maxit, cell_area=cell_area, threshold=threshold)
    stats.iterations += first.iterations
    stats.fallback_used = True
    return x, stats


def jacobian_vector(
    R: Callable[[Array], Array],
    x: Array,
    v: Array,
    eps: float = 1e-6,
    *,
    cell_area: float = 1.0,
) -> Array:
    """Central finite-difference approximation of J(x) v.

    The step is ``eps * ||x|| / ||v||`` when both norms are nonzero, so the
    perturbation has size ``eps * ||x||`` regardless of the scale of ``v``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    vn = weighted_norm(v, cell_area)
    if vn == 0:
        return np.zeros_like(v)
    xn = weighted_norm(x, cell_area)
    h = eps * xn / vn if xn > 0 else eps
    return (R(x + h * v) - R(x - h * v)) / (2 * h)
