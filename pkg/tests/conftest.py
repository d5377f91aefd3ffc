import numpy as np
import pytest

from cforge.config import SolverOptions
from cforge.fixtures import bumpy_metric
from cforge.grid_geometry import GridSpec, ScalarField, flat_metric


@pytest.fixture(scope="session")
def grid8():
    return GridSpec(8, 1.0)


@pytest.fixture(scope="session")
def grid12():
    return GridSpec(12, 1.0)


@pytest.fixture(scope="session")
def grid16():
    return GridSpec(16, 1.0)


@pytest.fixture(scope="session")
def flat8(grid8):
    return flat_metric(grid8)


@pytest.fixture(scope="session")
def flat16(grid16):
    return flat_metric(grid16)


@pytest.fixture(scope="session")
def bumpy8(grid8):
    return bumpy_metric(grid8)


@pytest.fixture(scope="session")
def bumpy16(grid16):
    return bumpy_metric(grid16)


@pytest.fixture()
def cfg():
    return SolverOptions()


@pytest.fixture()
def rng():
    return np.random.default_rng(417)


def smooth_positive(grid: GridSpec, rng, floor=0.5, modes=2, amp=0.3):
    """Random positive band-limited field, for property tests."""
    x, y, z = grid.coords
    two_pi = 2 * np.pi / grid.box_length
    vals = np.zeros(grid.shape)
    for _ in range(modes):
        k = rng.integers(1, 3, size=3)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        vals += rng.uniform(0.2, 1.0) * (
            np.sin(two_pi * k[0] * x + ph[0])
            * np.cos(two_pi * k[1] * y + ph[1])
            + 0.5 * np.sin(two_pi * k[2] * z + ph[2]))
    scale = amp / max(float(np.max(np.abs(vals))), 1e-12)
    return ScalarField(grid, floor + scale * vals + amp)
