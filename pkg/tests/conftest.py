import numpy as np
import pytest

from adapterlab.render import Camera
from adapterlab.world import make_world


@pytest.fixture(scope="session")
def quad_world():
    return make_world("bimodal-texture", resolution=12, view_noise=0.1)


@pytest.fixture(scope="session")
def splat_world():
    return make_world("bimodal-splat")


@pytest.fixture(scope="session")
def tetra_world():
    return make_world("tetra-4", resolution=24)


def ring(n=4, res=32, distance=2.8, elevation=20.0, focal=None):
    focal = 1.2 * res if focal is None else focal
    return [Camera.orbit(a, elevation, distance, focal=focal, width=res, height=res) for a in np.linspace(0, 360, n, endpoint=False)]
