import numpy as np
import pytest

from mmc_tdgl.grid import Field2D, Grid2D
from mmc_tdgl.physics import SimParams


@pytest.fixture
def params():
    return SimParams()


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def grid64():
    return Grid2D(64, 64)


def smooth_field(grid, amp=0.01, mean=0.65):
    x, y = grid.coords()
    return Field2D(grid, mean + amp * np.cos(x) + amp * np.cos(y))


def noisy_field(grid, rng, mean=0.65, amp=0.05):
    v = mean + amp * rng.uniform(-1, 1, grid.shape)
    return Field2D(grid, v)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
