import numpy as np
import pytest

from deqmpi.forward import ScannerConfig, SystemMatrix, discrepant_sm, simulate_sm


@pytest.fixture(scope="session")
def sm():
    return simulate_sm(ScannerConfig(), 0)


@pytest.fixture(scope="session")
def smr(sm):
    return discrepant_sm(sm, 2)


@pytest.fixture(scope="session")
def small_sm():
    """A 4x8 grid scanner, cheap enough for loops inside tests."""
    cfg = ScannerConfig(grid=(4, 8), n_angles=6, harmonics=(2, 5))
    return simulate_sm(cfg, 0)


def toy_sm(A, grid):
    return SystemMatrix.from_matrix(np.asarray(A, dtype=np.float64), grid)
