"""Single time steps of the two semi-implicit schemes.

The linear scheme freezes ``G``, ``G'`` and the gradient of the old state and
averages the stiff terms between the two time levels, so each step is one
linear solve. The nonlinear scheme evaluates the coefficients at the midpoint
state and is solved by Newton iteration with matrix-free Jacobian products.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from mmc_tdgl import _kernels
from mmc_tdgl.grid import Field2D, grad_x, grad_y, l2_norm, lap
from mmc_tdgl.linsolve import (
    LinearOperator,
    SolveStats,
    SolverError,
    jacobian_vector,
    solve,
    weighted_norm,
)
from mmc_tdgl.physics import AdmissibleBand, DomainError, G, Gprime, SimParams, total_energy

log = logging.getLogger(__name__)


class SchemeKind(enum.Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


class StepError(RuntimeError):
    def __init__(self, message: str, stats: SolveStats | None = None):
        super().__init__(message)
        self.stats = stats


class BandError(StepError):
    pass


class StabilityError(StepError):
    pass


@dataclass
class StepOptions:
    cg_tol: float = 1e-6
    cg_mode: str = "relative"
    cg_maxit: int | None = None
    newton_tol: float = 1e-8
    newton_maxit: int = 50
    newton_step_tol: float = 1e-12
    jvp_eps: float = 1e-6
    band: AdmissibleBand | None = None
    band_policy: str = "strict"
    check_stability: bool = False
    stability_tol: float = 1e-12


@dataclass
class StepReport:
    solver: SolveStats
    newton_iterations: int
    l2_before: float
    l2_after: float
    energy_after: float
    residual_history: list[float] = field(default_factory=list)


class LinearSystem:
    """The linear scheme's system for one step, with the old state frozen.

    ``apply`` is ``v/dt - (M0/2) G'(u) grad(u).grad(v) - (M0/2) G(u) lap(v)
    + M0 kBT K lap^2(v)`` and ``rhs`` is the matching right-hand side, so
    ``apply(u_next) == rhs``. ``increment_rhs`` equals ``rhs - apply(u)`` in
    exact arithmetic but is formed without the ``u/dt`` cancellation.
    """

    def __init__(self, phi_n: Field2D, dt: float, p: SimParams):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        g = phi_n.grid
        u = np.ascontiguousarray(phi_n.values)
        self.grid = g
        self.dt = dt
        gv = G(u, p)
        gp = Gprime(u, p)
        ux = grad_x(u, g.hx)
        uy = grad_y(u, g.hy)
        lu = lap(u, g.hx, g.hy)
        blu = lap(lu, g.hx, g.hy)
        half = 0.5 * p.m0
        self.cx = np.ascontiguousarray(half * gp * ux)
        self.cy = np.ascontiguousarray(half * gp * uy)
        self.cl = np.ascontiguousarray(half * gv)
        self.cb = p.m0 * p.kbt * p.kcoef
        grad_sq = ux * ux + uy * uy
        self.rhs = u / dt + half * gp * grad_sq + half * gv * lu - self.cb * blu
        self.increment_rhs = p.m0 * gp * grad_sq + p.m0 * gv * lu - 2 * self.cb * blu
        self._consts = (
            1.0 / dt, self.cx, self.cy, self.cl, self.cb,
            1.0 / g.hx**2, 1.0 / g.hy**2, 0.5 / g.hx, 0.5 / g.hy,
        )
        self._tmp = np.empty(g.shape)
        self._tmp2 = np.empty(g.shape)

    def apply(self, v: np.ndarray) -> np.ndarray:
        out = np.empty(self.grid.shape)
        _kernels.semi_implicit_apply(np.ascontiguousarray(v), out, self._tmp, *self._consts)
        return out

    def apply_t(self, v: np.ndarray) -> np.ndarray:
        out = np.empty(self.grid.shape)
        _kernels.semi_implicit_apply_t(
            np.ascontiguousarray(v), out, self._tmp, self._tmp2, *self._consts
        )
        return out

    @property
    def operator(self) -> LinearOperator:
        return LinearOperator(self.apply, symmetric_hint=False)

    @property
    def transpose(self) -> LinearOperator:
        return LinearOperator(self.apply_t, symmetric_hint=False)


def _threshold(rhs: np.ndarray, opts: StepOptions, cell_area: float) -> float:
    if opts.cg_mode == "absolute":
        return opts.cg_tol
    return opts.cg_tol * max(1.0, weighted_norm(rhs, cell_area))


def _enforce_band(values: np.ndarray, opts: StepOptions, p: SimParams) -> np.ndarray:
    band = opts.band or AdmissibleBand.default(p)
    inside = band.contains(values)
    if np.all(inside):
        return values
    j, i = np.argwhere(~inside)[0]
    if opts.band_policy == "clamp":
        log.warning(
            "CLAMPING %d node(s) to band [%g, %g]; first offender (i=%d, j=%d) phi=%r",
            int(np.count_nonzero(~inside)), band.lo, band.hi, i, j, float(values[j, i]),
        )
        return np.clip(values, band.lo, band.hi)
    raise BandError(
        f"node (i={i}, j={j}) left the admissible band [{band.lo}, {band.hi}]: phi={float(values[j, i])!r}"
    )


def _finish(phi_n: Field2D, new: np.ndarray, p: SimParams, opts: StepOptions,
            stats: SolveStats, newton_its: int, history: list[float]) -> tuple[Field2D, StepReport]:
    new = _enforce_band(new, opts, p)
    out = Field2D(phi_n.grid, new)
    report = StepReport(
        solver=stats,
        newton_iterations=newton_its,
        l2_before=l2_norm(phi_n),
        l2_after=l2_norm(out),
        energy_after=total_energy(out, p),
        residual_history=history,
    )
    if opts.check_stability and report.l2_after > report.l2_before + opts.stability_tol:
        raise StabilityError(
            f"L2 norm grew from {report.l2_before!r} to {report.l2_after!r}", stats
        )
    return out, report


def linear_step(phi_n: Field2D, dt: float, p: SimParams,
                opts: StepOptions | None = None) -> tuple[Field2D, StepReport]:
    """Advance one step of the linear semi-implicit scheme.

    The system is solved for the increment ``u_next - u`` starting from zero,
    which is the same Krylov iteration as starting from ``u`` on the full
    system; the stopping threshold is taken relative to the full right-hand side.
    """
    opts = opts or StepOptions()
    system = LinearSystem(phi_n, dt, p)
    area = phi_n.grid.cell_area
    thresh = _threshold(system.rhs, opts, area)
    try:
        delta, stats = solve(
            system.operator, system.increment_rhs, None, opts.cg_tol, opts.cg_maxit,
            At=system.transpose, cell_area=area, threshold=thresh,
        )
    except SolverError as err:
        raise StepError(f"linear solve failed: {err}", err.stats) from err
    return _finish(phi_n, phi_n.values + delta, p, opts, stats, 0, [])


class NonlinearResidual:
    """Residual of the midpoint scheme as a function of the new state."""

    def __init__(self, phi_n: Field2D, dt: float, p: SimParams):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        g = phi_n.grid
        self.grid = g
        self.p = p
        self.dt = dt
        self.u = np.ascontiguousarray(phi_n.values)
        self.lap_u = lap(self.u, g.hx, g.hy)
        self.blap_u = lap(self.lap_u, g.hx, g.hy)
        self.cb = p.m0 * p.kbt * p.kcoef

    def __call__(self, x: np.ndarray) -> np.ndarray:
        g, p = self.grid, self.p
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty(g.shape)
        bad = _kernels.midpoint_residual(
            x, self.u, self.lap_u, self.blap_u, out, np.empty(g.shape),
            1.0 / self.dt, p.m0, p.kbt, p.tau, p.ncoef, p.rho, p.chi, self.cb,
            1.0 / g.hx**2, 1.0 / g.hy**2, 0.5 / g.hx, 0.5 / g.hy,
        )
        if bad >= 0:
            j, i = divmod(bad, g.nx)
            m = 0.5 * (x[j, i] + self.u[j, i])
            raise DomainError(f"midpoint at node (i={i}, j={j}) is {m!r}, outside (0, {1.0 / p.rho!r})")
        return out


def nonlinear_residual(phi_next: Field2D, phi_n: Field2D, dt: float, p: SimParams) -> Field2D:
    return Field2D(phi_n.grid, NonlinearResidual(phi_n, dt, p)(phi_next.values))


def nonlinear_step(phi_n: Field2D, dt: float, p: SimParams,
                   opts: StepOptions | None = None) -> tuple[Field2D, StepReport]:
    """Advance one step of the midpoint scheme by Newton iteration from ``u``."""
    opts = opts or StepOptions()
    R = NonlinearResidual(phi_n, dt, p)
    area = phi_n.grid.cell_area
    x = phi_n.values.copy()
    total = SolveStats(0, 0.0, True, False, "newton")
    history: list[float] = []
    for k in range(opts.newton_maxit + 1):
        try:
            r = R(x)
        except DomainError as err:
            raise BandError(f"newton iterate {k}: {err}", total) from err
        rn = weighted_norm(r, area)
        history.append(rn)
        total.final_residual_norm = rn
        if rn <= opts.newton_tol:
            return _finish(phi_n, x, p, opts, total, k, history)
        if k == opts.newton_maxit:
            break
        xk = x
        J = LinearOperator(lambda v: jacobian_vector(R, xk, v, opts.jvp_eps, cell_area=area))
        thresh = max(rn * min(1e-4, rn), 1e-3 * opts.newton_tol)
        try:
            delta, stats = solve(J, -r, None, opts.cg_tol, opts.cg_maxit,
                                 cell_area=area, threshold=thresh)
        except SolverError as err:
            raise StepError(f"newton iterate {k}: inner solve failed: {err}", err.stats) from err
        total.iterations += stats.iterations
        total.fallback_used |= stats.fallback_used
        x = x + delta
        if weighted_norm(delta, area) <= opts.newton_step_tol:
            try:
                history.append(weighted_norm(R(x), area))
            except DomainError as err:
                raise BandError(str(err), total) from err
            total.final_residual_norm = history[-1]
            return _finish(phi_n, x, p, opts, total, k + 1, history)
    total.converged = False
    raise StepError(
        f"newton did not converge in {opts.newton_maxit} iterations (residual {history[-1]:.3e})",
        total,
    )


def step(kind: SchemeKind, phi_n: Field2D, dt: float, p: SimParams,
         opts: StepOptions | None = None) -> tuple[Field2D, StepReport]:
    if kind is SchemeKind.LINEAR:
        return linear_step(phi_n, dt, p, opts)
    return nonlinear_step(phi_n, dt, p, opts)
