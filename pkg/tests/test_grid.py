import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmc_tdgl.grid import (
    Field2D,
    Grid2D,
    GridMismatchError,
    biharmonic,
    grad_x,
    grad_y,
    gradient,
    inner,
    l2_norm,
    lap,
    laplacian,
    mean,
    shift,
)

from oracles import loop_grad, loop_inner, loop_lap

SMALL_GRIDS = [Grid2D(4, 4, 4.0, 4.0), Grid2D(5, 4, 1.3, 0.7), Grid2D(4, 6, 2 * math.pi, 1.0)]


def test_rejects_tiny_grid():
    with pytest.raises(ValueError):
        Grid2D(3, 8)
    with pytest.raises(ValueError):
        Grid2D(8, 8, lx=0.0)


def test_flat_layout_is_row_major():
    g = Grid2D(5, 4)
    f = Field2D(g, np.arange(20.0))
    # flat index i + j*nx
    assert f.values[2, 3] == 3 + 2 * 5


def test_constant_field_has_zero_derivatives():
    g = Grid2D(8, 6, 1.0, 2.0)
    f = g.constant(0.37)
    grad = gradient(f)
    assert np.all(grad.x == 0) and np.all(grad.y == 0)
    assert np.all(laplacian(f).values == 0)
    assert np.all(biharmonic(f).values == 0)


def test_gradient_of_x_uses_periodic_wrap():
    g = Grid2D(4, 4, 4.0, 4.0)
    x, _ = g.coords()
    gx = gradient(Field2D(g, x)).x
    expected = loop_grad(x, g.hx, g.hy)[0]
    assert np.array_equal(gx, expected)
    assert np.all(gx[:, 1:3] == 1.0)
    # wrap columns: (x[1] - x[3]) / 2h and (x[0] - x[2]) / 2h
    wrap = -(g.lx - 2 * g.hx) / (2 * g.hx)
    assert np.all(gx[:, 0] == wrap) and np.all(gx[:, 3] == wrap)
    assert wrap == -1.0


def test_gradient_of_cos(grid64):
    x, _ = grid64.coords()
    gx = gradient(Field2D(grid64, np.cos(x))).x
    h = grid64.hx
    np.testing.assert_allclose(gx, -np.sin(x) * np.sin(h) / h, atol=1e-12)
    assert math.isclose(math.sin(h) / h, 0.998395, abs_tol=1e-6)


def test_laplacian_of_cos(grid64):
    x, _ = grid64.coords()
    h = grid64.hx
    symbol = (2 * math.cos(h) - 2) / h**2
    out = laplacian(Field2D(grid64, np.cos(x))).values
    np.testing.assert_allclose(out, symbol * np.cos(x), atol=1e-11)
    assert math.isclose(symbol, -(1 - h**2 / 12), rel_tol=1e-6)


def test_biharmonic_of_cos(grid64):
    x, _ = grid64.coords()
    h = grid64.hx
    symbol = ((2 * math.cos(h) - 2) / h**2) ** 2
    out = biharmonic(Field2D(grid64, np.cos(x))).values
    np.testing.assert_allclose(out, symbol * np.cos(x), atol=1e-9)


def test_spike_laplacian():
    g = Grid2D(4, 4, 4.0, 4.0)
    v = np.zeros(g.shape)
    v[0, 0] = 1.0
    out = laplacian(Field2D(g, v)).values
    expected = np.zeros(g.shape)
    expected[0, 0] = -4
    expected[0, 1] = expected[1, 0] = expected[0, 3] = expected[3, 0] = 1
    assert np.array_equal(out, expected)


def test_biharmonic_is_laplacian_composed(rng):
    g = Grid2D(7, 5, 1.1, 0.9)
    f = Field2D(g, rng.normal(size=g.shape))
    assert np.array_equal(biharmonic(f).values, laplacian(laplacian(f)).values)


@pytest.mark.parametrize("g", SMALL_GRIDS)
def test_stencils_match_loop_oracle_bitwise(g, rng):
    v = rng.normal(size=g.shape)
    f = Field2D(g, v)
    ox, oy = loop_grad(v, g.hx, g.hy)
    grad = gradient(f)
    assert np.array_equal(grad.x, ox)
    assert np.array_equal(grad.y, oy)
    lap = loop_lap(v, g.hx, g.hy)
    assert np.array_equal(laplacian(f).values, lap)
    assert np.array_equal(biharmonic(f).values, loop_lap(lap, g.hx, g.hy))


def test_array_stencils_on_5x3(rng):
    # Grid2D needs 4 nodes per side; the array-level stencils have no such limit
    v = rng.normal(size=(3, 5))
    hx, hy = 0.3, 0.45
    assert np.array_equal(grad_x(v, hx), loop_grad(v, hx, hy)[0])
    assert np.array_equal(grad_y(v, hy), loop_grad(v, hx, hy)[1])
    assert np.array_equal(lap(v, hx, hy), loop_lap(v, hx, hy))
    assert np.array_equal(lap(lap(v, hx, hy), hx, hy), loop_lap(loop_lap(v, hx, hy), hx, hy))


def test_inner_and_norm_values(grid64):
    one = grid64.constant(1.0)
    assert math.isclose(inner(one, one), (2 * math.pi) ** 2, rel_tol=1e-12)
    assert math.isclose(inner(one, one), 39.4784176, rel_tol=1e-8)
    x, _ = grid64.coords()
    assert abs(inner(Field2D(grid64, np.cos(x)), Field2D(grid64, np.sin(x)))) < 1e-12
    assert math.isclose(l2_norm(grid64.constant(0.01)), 0.0628319, rel_tol=1e-6)
    assert l2_norm(grid64.constant(0.0)) == 0.0


def test_inner_grid_mismatch():
    with pytest.raises(GridMismatchError):
        inner(Grid2D(4, 4).constant(1.0), Grid2D(4, 5).constant(1.0))


def test_norm_and_mean_match_direct_sums(rng):
    g = Grid2D(4, 4, 1.0, 2.0)
    v = rng.normal(size=g.shape)
    f = Field2D(g, v)
    assert math.isclose(l2_norm(f) ** 2, loop_inner(v, v, g.hx, g.hy), rel_tol=1e-12)
    assert math.isclose(inner(f, f), l2_norm(f) ** 2, rel_tol=1e-14)
    assert math.isclose(mean(f), sum(v.ravel().tolist()) / 16, rel_tol=1e-12)


def test_mean_simple_cases():
    g = Grid2D(4, 4)
    assert mean(g.constant(0.3)) == pytest.approx(0.3, rel=1e-15)
    v = np.zeros(g.shape)
    v[:2] = 1.0
    assert mean(Field2D(g, v)) == 0.5


def test_shift_identities(rng):
    g = Grid2D(4, 4, 4.0, 4.0)
    f = Field2D(g, rng.normal(size=g.shape))
    assert np.array_equal(shift(f, 0, 0).values, f.values)
    assert np.array_equal(shift(f, 4, 4).values, f.values)
    s = shift(f, 1, 0)
    # result[i, j] = f[i - 1, j]
    assert s.values[0, 1] == f.values[0, 0]


def test_rejects_nonfinite_values():
    with pytest.raises(ValueError):
        Field2D(Grid2D(4, 4), np.full((4, 4), np.nan))


# magnitudes well away from underflow so relative bounds stay meaningful
field_4x4 = arrays(np.float64, (5, 4), elements=st.integers(-10**6, 10**6).map(lambda k: k / 1e5))


@settings(max_examples=60, deadline=None)
@given(field_4x4, field_4x4)
def test_laplacian_summation_by_parts(a, b):
    g = Grid2D(4, 5, 1.7, 0.8)
    f, h = Field2D(g, a), Field2D(g, b)
    lhs = inner(laplacian(f), h)
    rhs = inner(f, laplacian(h))
    # ||lap|| <= 4/hx^2 + 4/hy^2 bounds both sides
    op_norm = 4 / g.hx**2 + 4 / g.hy**2
    scale = op_norm * l2_norm(f) * l2_norm(h)
    assert abs(lhs - rhs) <= 1e-12 * scale
    assert inner(laplacian(f), f) <= 1e-12 * op_norm * l2_norm(f) ** 2


@settings(max_examples=60, deadline=None)
@given(field_4x4)
def test_discrete_conservation(a):
    g = Grid2D(4, 5, 1.0, 1.0)
    f = Field2D(g, a)
    for op in (laplacian, biharmonic):
        out = op(f).values
        assert abs(out.sum()) <= 1e-12 * max(1.0, np.abs(out).sum())


@settings(max_examples=40, deadline=None)
@given(field_4x4, st.integers(-6, 6), st.integers(-6, 6))
def test_operators_commute_with_shift(a, sx, sy):
    g = Grid2D(4, 5, 1.0, 1.3)
    f = Field2D(g, a)
    assert np.array_equal(laplacian(shift(f, sx, sy)).values, shift(laplacian(f), sx, sy).values)
    assert np.array_equal(biharmonic(shift(f, sx, sy)).values, shift(biharmonic(f), sx, sy).values)
    g1 = gradient(shift(f, sx, sy))
    g2 = gradient(f)
    assert np.array_equal(g1.x, np.roll(g2.x, (sy, sx), axis=(0, 1)))
    assert np.array_equal(g1.y, np.roll(g2.y, (sy, sx), axis=(0, 1)))
