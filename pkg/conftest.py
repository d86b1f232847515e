# conftest.py

import numpy as np
import pytest

from grid_sim import SimConfig
from kernels import KernelModel
from stationary import IndexWindow, ShiftSequence, m_bar


@pytest.fixture(scope="module")
def model():
    """Canonical kernels: k0 = gamma0 = 1, alpha = 0.3, beta = 1.5."""
    return KernelModel()


@pytest.fixture(scope="module")
def flat_model():
    return KernelModel(flat=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="module")
def window():
    return IndexWindow(n_lo=-20, n_hi=12)


@pytest.fixture(scope="module")
def profile(model, window):
    """Stationary comb with A = 1, rho = 0 on [-20, 12]."""
    return m_bar(model, 1.0, ShiftSequence.constant(window, 0.0))


@pytest.fixture(scope="module")
def small_config(model):
    """Coarse grid on [-6, 4] for the simulator tests."""
    return SimConfig(kernel=model, window=IndexWindow(n_lo=-6, n_hi=4), cells_per_interval=16)
