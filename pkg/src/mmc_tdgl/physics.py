"""Reticular free energy, its curvature coefficients, and the total energy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmc_tdgl.grid import Field2D, grad_x, grad_y


class DomainError(ValueError):
    """Order parameter outside the interval where the free energy is defined."""


@dataclass(frozen=True)
class SimParams:
    m0: float = 0.2
    chi: float = 0.4
    tau: float = 1e7
    ncoef: float = 800.0
    rho: float = 1.0
    kb: float = 1.0
    temp: float = 1.0
    kcoef: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("m0", "tau", "ncoef", "rho", "kb", "temp", "kcoef", "alpha", "beta"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def kbt(self) -> float:
        return self.kb * self.temp


@dataclass(frozen=True)
class AdmissibleBand:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError(f"band must satisfy 0 < lo < hi, got ({self.lo}, {self.hi})")

    @classmethod
    def default(cls, p: SimParams, margin: float = 1e-4) -> AdmissibleBand:
        return cls(margin, 1.0 / p.rho - margin)

    def check_params(self, p: SimParams) -> None:
        if self.hi >= 1.0 / p.rho:
            raise ValueError(f"band upper edge {self.hi} must stay below 1/rho = {1.0 / p.rho}")

    def contains(self, values) -> np.ndarray:
        v = np.asarray(values)
        return (v >= self.lo) & (v <= self.hi)


def _check_open(phi, upper: float, what: str):
    phi = np.asarray(phi, dtype=np.float64)
    bad = ~((phi > 0) & (phi < upper))
    if np.any(bad):
        offender = phi[bad].flat[0] if phi.ndim else float(phi)
        raise DomainError(f"{what}: phi={offender!r} outside (0, {upper!r})")
    return phi


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def G(phi, p: SimParams):
    """Second derivative of the reticular free energy density."""
    phi = _check_open(phi, 1.0 / p.rho, "G")
    rho = p.rho
    val = 1 / (p.tau * phi) + 1 / (p.ncoef * phi) + rho**2 / (1 - rho * phi) - 2 * p.chi * rho**2
    return _out(p.kbt * val)


def Gprime(phi, p: SimParams):
    phi = _check_open(phi, 1.0 / p.rho, "Gprime")
    rho = p.rho
    val = -1 / (p.tau * phi**2) - 1 / (p.ncoef * phi**2) + rho**3 / (1 - rho * phi) ** 2
    return _out(p.kbt * val)


def F(phi, p: SimParams):
    """Reticular free energy density (carries the k_B T prefactor)."""
    phi = _check_open(phi, 1.0 / p.rho, "F")
    rho, tau = p.rho, p.tau
    s = 1 - rho * phi
    val = (
        (phi / tau) * np.log(p.alpha * phi / tau)
        + (phi / p.ncoef) * np.log(p.beta * phi / tau)
        + s * np.log(s)
        + p.chi * rho * phi * s
    )
    return _out(p.kbt * val)


def kappa(phi, sigma: float = 1.0):
    """Composition-dependent gradient coefficient sigma^2 / (36 phi (1 - phi)).

    Only used for checking; the dynamics use the constant ``kcoef``.
    """
    phi = _check_open(phi, 1.0, "kappa")
    return _out(sigma**2 / (36 * phi * (1 - phi)))


def check_field(f: Field2D, p: SimParams) -> None:
    v = f.values
    upper = 1.0 / p.rho
    bad = ~((v > 0) & (v < upper))
    if np.any(bad):
        j, i = np.argwhere(bad)[0]
        raise DomainError(f"node (i={i}, j={j}) has phi={v[j, i]!r} outside (0, {upper!r})")


def total_energy(f: Field2D, p: SimParams) -> float:
    """Bulk plus gradient energy, unnormalized (integrated over the domain)."""
    check_field(f, p)
    g = f.grid
    v = f.values
    gx = grad_x(v, g.hx)
    gy = grad_y(v, g.hy)
    density = F(v, p) + p.kbt * p.kcoef * (gx * gx + gy * gy)
    return float(np.sum(density) * g.hx * g.hy)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    phi_at_min: float
    g_min: float

    def __str__(self) -> str:
        if self.ok:
            return f"ok (min G = {self.g_min:.6g} at phi = {self.phi_at_min:.6g})"
        return f"FAIL: G = {self.g_min:.6g} < 0 at phi = {self.phi_at_min:.6g}"


def validate_params(p: SimParams, band: AdmissibleBand, samples: int = 10_000) -> ValidationReport:
    """Scan G over the band; the L2 stability argument needs G >= 0 there."""
    band.check_params(p)
    phis = np.linspace(band.lo, band.hi, samples + 2)
    gs = G(phis, p)
    k = int(np.argmin(gs))
    return ValidationReport(bool(gs[k] >= 0), float(phis[k]), float(gs[k]))
