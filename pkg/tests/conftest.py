"""Shared fixtures: seeded scenes and cameras kept away from clamp boundaries."""
import numpy as np
import pytest

from refsplat.gaussians import Camera, GaussianSet
from refsplat.sh import num_sh_coeffs


def make_camera(size=32, focal=None, looking="+z"):
    focal = focal or size * 1.25
    return Camera(
        width=size, height=size, fx=focal, fy=focal,
        cx=size / 2.0, cy=size / 2.0,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def make_scene(n, seed, degree=1, z_range=(2.5, 5.0), xy=0.8, scale_range=(0.08, 0.3)):
    """Seeded scene in front of an identity camera.

    Colors and opacities are kept mid-range so rendered pixels stay strictly
    inside (0, 1) and finite differencing never crosses a clamp.
    """
    rng = np.random.default_rng(seed)
    k = num_sh_coeffs(degree)
    positions = np.column_stack(
        [
            rng.uniform(-xy, xy, n),
            rng.uniform(-xy, xy, n),
            rng.uniform(z_range[0], z_range[1], n),
        ]
    )
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 3))
    sh_trans = rng.normal(0.0, 0.05, (n, 3, k))
    sh_trans[:, :, 0] = rng.normal(0.0, 0.15, (n, 3))
    sh_ref = rng.normal(0.0, 0.05, (n, 3, k))
    sh_ref[:, :, 0] = rng.normal(0.0, 0.15, (n, 3))
    return GaussianSet(
        positions=positions,
        rotations=rotations,
        log_scales=log_scales,
        sh_trans=sh_trans,
        sh_ref=sh_ref,
        raw_alpha_trans=rng.uniform(-1.0, 1.5, n),
        raw_alpha_ref=rng.uniform(-1.0, 1.5, n),
        raw_beta_ref=rng.uniform(-2.0, 2.0, n),
    )


@pytest.fixture
def small_camera():
    return make_camera(8, focal=10.0)
