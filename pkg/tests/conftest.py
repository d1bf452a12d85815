import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from multiwell_plates.density import MultiWellModel
from multiwell_plates.geometry import MidplaneGrid
from multiwell_plates.linalg import Well

U_TALL = np.diag([4.0, 1.0, 1.0])
U_TWIN = np.array([[2.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
U_THICK = np.diag([1.0, 1.0, 2.0])


@pytest.fixture
def rng():
    return np.random.default_rng(20261017)


@pytest.fixture(scope="session")
def sampled_rotations():
    """10^5 Haar rotations, frozen by seed, for brute-force maximization oracles."""
    return Rotation.random(100_000, random_state=12345).as_matrix()


def brute_max(M, rotations):
    return float(np.max(np.einsum("nij,ij->n", rotations, M)))


@pytest.fixture
def unit_grid():
    return MidplaneGrid.square(41)


@pytest.fixture
def identity_model():
    return MultiWellModel((Well(np.eye(3)),))


@pytest.fixture
def twin_model():
    return MultiWellModel((Well(U_TALL), Well(U_TWIN)))


def random_spd(rng, spread=0.3):
    A = np.eye(3) + spread * rng.normal(size=(3, 3))
    return A @ A.T + 0.2 * np.eye(3)
