import warnings

import numpy as np
import pytest

from rgflow.grid import TorusGrid
from rgflow.kernels import KernelFamily, ScaleGrid
from rgflow.renorm import power_counting

warnings.filterwarnings("ignore", message=".*exceeds the contraction bound.*")


@pytest.fixture(scope="session")
def grid64():
    return TorusGrid(1, 64)


@pytest.fixture(scope="session")
def grid32():
    return TorusGrid(1, 32)


@pytest.fixture(scope="session")
def grid16():
    return TorusGrid(1, 16)


@pytest.fixture(scope="session")
def pc45():
    return power_counting(1, 0.45)


@pytest.fixture(scope="session")
def pc40():
    return power_counting(1, 0.40)


@pytest.fixture(scope="session")
def fam45_64(grid64):
    return KernelFamily(grid64, 0.45, ScaleGrid.build(1e-4, 48))


@pytest.fixture(scope="session")
def fam40_64(grid64):
    return KernelFamily(grid64, 0.40, ScaleGrid.build(1e-4, 48))


@pytest.fixture(scope="session")
def fam45_64_fine(grid64):
    return KernelFamily(grid64, 0.45, ScaleGrid.build(1e-4, 192))


@pytest.fixture(scope="session")
def fam40_64_fine(grid64):
    return KernelFamily(grid64, 0.40, ScaleGrid.build(1e-4, 192))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260808)
