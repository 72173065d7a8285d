import numpy as np
import pytest

from dynsurf import geom
from dynsurf.raster import Camera
from dynsurf.surfel import N_SH, sh0_from_rgb


def random_prims(rng, K, thick=False, spread=0.7, z_squash=0.3,
                 scale_lo=0.08, scale_hi=0.35, sh_noise=0.08):
    """Random warped-primitive arrays for rasterizer tests."""
    centers = rng.uniform(-spread, spread, size=(K, 3))
    centers[:, 2] *= z_squash
    frames = geom.quat_to_rotmat(geom.quat_normalize(rng.standard_normal((K, 4))))
    scales = np.zeros((K, 3))
    scales[:, :2] = rng.uniform(scale_lo, scale_hi, size=(K, 2))
    if thick:
        scales[:, 2] = rng.uniform(0.005, 0.08, size=K)
    opac = rng.uniform(0.2, 0.95, size=K)
    sh = np.zeros((K, N_SH, 3))
    sh[:, 0, :] = sh0_from_rgb(rng.uniform(0.15, 0.85, size=(K, 3)))
    if sh_noise:
        sh[:, 1:4, :] = rng.normal(0.0, sh_noise, size=(K, 3, 3))
    return centers, frames, scales, opac, sh


@pytest.fixture
def test_camera():
    return Camera.look_at(eye=(0.3, 0.4, 3.0), target=(0.0, 0.0, 0.0),
                          width=48, height=48, fov_deg=40.0)
