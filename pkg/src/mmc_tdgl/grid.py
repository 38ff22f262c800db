"""Periodic 2-D uniform grid and the central-difference operators on it.

Node values are stored as ``(ny, nx)`` arrays, so ``values[j, i]`` is node
``(i, j)`` and the flat row-major index is ``i + j * nx``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmc_tdgl import _kernels


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float = 2 * np.pi
    ly: float = 2 * np.pi

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid needs at least 4x4 nodes, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError(f"domain lengths must be positive, got lx={self.lx}, ly={self.ly}")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two ``(ny, nx)`` arrays (x, y)."""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        return np.meshgrid(x, y)

    def field(self, values) -> Field2D:
        return Field2D(self, values)

    def constant(self, c: float) -> Field2D:
        return Field2D(self, np.full(self.shape, float(c)))


@dataclass(frozen=True, eq=False)
class Field2D:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            if v.size == self.grid.nx * self.grid.ny:
                v = v.reshape(self.grid.shape)
            else:
                raise GridMismatchError(
                    f"expected {self.grid.nx * self.grid.ny} values, got {v.size}"
                )
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", v)

    def __sub__(self, other: Field2D) -> Field2D:
        _check_same_grid(self, other)
        return Field2D(self.grid, self.values - other.values)

    def __add__(self, other: Field2D) -> Field2D:
        _check_same_grid(self, other)
        return Field2D(self.grid, self.values + other.values)


@dataclass(frozen=True, eq=False)
class VectorField2D:
    grid: Grid2D
    x: np.ndarray
    y: np.ndarray

    def norm_squared(self) -> np.ndarray:
        return self.x * self.x + self.y * self.y


def _check_same_grid(f: Field2D, g: Field2D) -> None:
    if f.grid != g.grid:
        raise GridMismatchError(f"fields live on different grids: {f.grid} vs {g.grid}")


# Array-level stencils. Each is written out term by term so the brute-force
# oracles in the tests can reproduce the exact floating point sequence.

def grad_x(a: np.ndarray, hx: float) -> np.ndarray:
    return (np.roll(a, -1, axis=1) - np.roll(a, 1, axis=1)) / (2 * hx)


def grad_y(a: np.ndarray, hy: float) -> np.ndarray:
    return (np.roll(a, -1, axis=0) - np.roll(a, 1, axis=0)) / (2 * hy)


def lap(a: np.ndarray, hx: float, hy: float) -> np.ndarray:
    xpart = (np.roll(a, -1, axis=1) - 2 * a + np.roll(a, 1, axis=1)) / (hx * hx)
    ypart = (np.roll(a, -1, axis=0) - 2 * a + np.roll(a, 1, axis=0)) / (hy * hy)
    return xpart + ypart


def gradient(f: Field2D) -> VectorField2D:
    g = f.grid
    return VectorField2D(g, grad_x(f.values, g.hx), grad_y(f.values, g.hy))


def laplacian(f: Field2D) -> Field2D:
    g = f.grid
    return Field2D(g, lap(f.values, g.hx, g.hy))


def biharmonic(f: Field2D) -> Field2D:
    """Two applications of the 5-point Laplacian (13-point effective stencil)."""
    return laplacian(laplacian(f))


def inner(f: Field2D, g: Field2D) -> float:
    """Discrete L2 inner product, summed sequentially in row-major order."""
    _check_same_grid(f, g)
    s = _kernels.seq_dot(f.values.ravel(), g.values.ravel())
    return s * f.grid.hx * f.grid.hy


def l2_norm(f: Field2D) -> float:
    return float(np.sqrt(inner(f, f)))


def mean(f: Field2D) -> float:
    return _kernels.seq_sum(f.values.ravel()) / f.values.size


def shift(f: Field2D, sx: int, sy: int) -> Field2D:
    """Periodic shift: result[i, j] = f[i - sx, j - sy]."""
    return Field2D(f.grid, np.roll(f.values, (sy, sx), axis=(0, 1)))
