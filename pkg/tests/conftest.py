import numpy as np
import pytest

from mprender.camera import make_camera
from mprender.pointcloud import PointCloudStore


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def simple_view():
    """64x64 camera at the origin looking down +z."""
    return make_camera(64, 64, focal=70.0)


def random_store(rng, n=50, z_range=(1.5, 4.0), spread=1.0):
    """Random points in front of the origin camera."""
    positions = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*z_range, n),
    ])
    rgb = rng.uniform(0, 1, (n, 3)).astype(np.float32)
    return PointCloudStore(positions=positions, rgb=rgb)
