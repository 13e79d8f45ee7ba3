"""
Shared fixtures for the echoinr test suite
"""

import numpy as np
import pytest

from echoinr.model import HashGridConfig
from echoinr.psf import PsfParams


@pytest.fixture
def small_psf():
    """8 MHz, f/1, single cycle: a 5x9 kernel at 0.09 mm spacing"""
    return PsfParams(f_number=1.0, n_cycles=1)


@pytest.fixture
def tiny_grid():
    """Hash grid small enough for a few dozen training steps per test"""
    return HashGridConfig(levels=4, table_size=2**10, base_resolution=4, hidden_width=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
