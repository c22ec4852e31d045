"""Tests for the Gaussian parameter set, activations, and projection."""
import math

import numpy as np
import pytest

from refsplat.gaussians import (
    COV_DILATION,
    Camera,
    GaussianSet,
    InitConfig,
    activate,
    covariance_from,
    init_scene,
    logit,
    project_gaussian,
    project_scene,
)
from refsplat.sh import SH_DC


def identity_camera(fx=100.0, fy=100.0, cx=0.0, cy=0.0, w=64, h=64):
    return Camera(w, h, fx, fy, cx, cy, np.eye(3), np.zeros(3))


def single_gaussian_scene(position, log_scale=-2.0, degree=1):
    from refsplat.sh import num_sh_coeffs

    k = num_sh_coeffs(degree)
    return GaussianSet(
        positions=np.array([position], dtype=float),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.full((1, 3), log_scale),
        sh_trans=np.zeros((1, 3, k)),
        sh_ref=np.zeros((1, 3, k)),
        raw_alpha_trans=np.zeros(1),
        raw_alpha_ref=np.zeros(1),
        raw_beta_ref=np.zeros(1),
    )


class TestCovariance:
    def test_identity(self):
        cov = covariance_from(np.array([1.0, 0, 0, 0]), np.ones(3))
        np.testing.assert_array_equal(cov, np.eye(3))

    def test_rot90_about_z(self):
        h = math.sqrt(0.5)
        cov = covariance_from(np.array([h, 0, 0, h]), np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = rng.uniform(0.2, 3.0, size=3)
            cov = covariance_from(q, s)
            np.testing.assert_allclose(
                np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2), rtol=1e-9
            )

    def test_exact_symmetry(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        cov = covariance_from(q, np.array([1.5, 0.3, 0.7]))
        assert np.abs(cov - cov.T).max() == 0.0

    def test_bad_inputs(self):
        with pytest.raises(ValueError, match="unit"):
            covariance_from(np.array([2.0, 0, 0, 0]), np.ones(3))
        with pytest.raises(ValueError, match="positive"):
            covariance_from(np.array([1.0, 0, 0, 0]), np.array([1.0, -1.0, 1.0]))
        with pytest.raises(ValueError, match="finite"):
            covariance_from(np.array([np.nan, 0, 0, 0]), np.ones(3))


class TestActivate:
    def test_beta_zero(self):
        assert activate(0.0, "beta_ref") == 0.5

    def test_scale_zero(self):
        assert activate(0.0, "scale") == 1.0

    def test_opacity_two(self):
        assert activate(2.0, "opacity_trans") == pytest.approx(0.8807970779778823, abs=1e-12)

    def test_strictly_increasing(self):
        xs = np.linspace(-6, 6, 30)
        for kind in ("opacity_trans", "opacity_ref", "beta_ref", "scale"):
            vals = [activate(float(x), kind) for x in xs]
            assert all(a < b for a, b in zip(vals, vals[1:])), kind

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activate(0.0, "color")


class TestProjection:
    def test_optical_axis(self):
        scene = single_gaussian_scene((0.0, 0.0, 5.0))
        splat = project_gaussian(scene, 0, identity_camera())
        np.testing.assert_allclose(splat.mean, [0.0, 0.0], atol=1e-12)
        assert splat.depth == pytest.approx(5.0)

    def test_pinhole_offset(self):
        scene = single_gaussian_scene((1.0, 0.0, 5.0))
        splat = project_gaussian(scene, 0, identity_camera(cx=50.0))
        assert splat.mean[0] == pytest.approx(70.0)
        assert splat.depth == pytest.approx(5.0)

    def test_behind_camera_culled(self):
        scene = single_gaussian_scene((0.0, 0.0, -1.0))
        assert project_gaussian(scene, 0, identity_camera()) is None

    def test_cull_counted(self):
        scene = single_gaussian_scene((0.0, 0.0, -1.0))
        proj = project_scene(scene, identity_camera())
        assert proj.culled_near == 1

    def test_depth_ordering_on_ray(self):
        cam = identity_camera()
        near = single_gaussian_scene((0.2, 0.1, 3.0))
        far = single_gaussian_scene((0.4, 0.2, 6.0))  # same camera ray
        d_near = project_gaussian(near, 0, cam).depth
        d_far = project_gaussian(far, 0, cam).depth
        assert d_far > d_near

    def test_splat_cov_positive_definite(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            scene = single_gaussian_scene(rng.uniform([-1, -1, 2], [1, 1, 8]))
            scene.rotations[0] = rng.normal(size=4)
            scene.log_scales[0] = rng.uniform(-4, 0, size=3)
            splat = project_gaussian(scene, 0, identity_camera())
            ev = np.linalg.eigvalsh(splat.cov)
            assert np.all(ev > 0)
            assert splat.depth > 0.01

    def test_scale_invariance(self):
        # scaling all s by c scales the pre-dilation screen covariance by c^2
        scene = single_gaussian_scene((0.3, -0.2, 4.0), log_scale=-1.5)
        scene.rotations[0] = np.array([0.9, 0.1, -0.3, 0.2])
        cam = identity_camera()
        base = project_gaussian(scene, 0, cam).cov - COV_DILATION * np.eye(2)
        c = 1.7
        scene.log_scales += math.log(c)
        scaled = project_gaussian(scene, 0, cam).cov - COV_DILATION * np.eye(2)
        np.testing.assert_allclose(scaled, c * c * base, rtol=1e-9)


class TestCamera:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            Camera(8, 8, 10, 10, 4, 4, np.eye(3) * 1.1, np.zeros(3))

    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError, match="focal"):
            Camera(8, 8, -1, 10, 4, 4, np.eye(3), np.zeros(3))

    def test_center(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        from refsplat.gaussians import quat_to_rot

        r = quat_to_rot(q)
        center = rng.normal(size=3)
        cam = Camera(8, 8, 10, 10, 4, 4, r, -r @ center)
        np.testing.assert_allclose(cam.center, center, atol=1e-12)


class TestInitScene:
    def test_single_point(self):
        scene = init_scene(np.zeros((1, 3)), np.ones((1, 3)))
        assert len(scene) == 1
        np.testing.assert_array_equal(scene.rotations, [[1, 0, 0, 0]])
        assert np.all(scene.sh_ref == 0)
        np.testing.assert_allclose(scene.sh_trans[0, :, 0], (1.0 - 0.5) / SH_DC)
        assert scene.raw_alpha_trans[0] == pytest.approx(logit(0.1))
        assert scene.raw_beta_ref[0] == pytest.approx(logit(0.05))

    def test_three_collinear_points(self):
        # only two neighbors exist; the knn=3 request falls back to those two
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        scene = init_scene(pts, np.full((3, 3), 0.5))
        scales = np.exp(scene.log_scales)
        assert scales[1, 0] == pytest.approx(1.0)  # mean of distances 1 and 1
        assert scales[0, 0] == pytest.approx(1.5)  # mean of distances 1 and 2

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(20, 3))
        cols = rng.uniform(size=(20, 3))
        a = init_scene(pts, cols)
        b = init_scene(pts, cols)
        for f in ("positions", "log_scales", "sh_trans", "raw_beta_ref"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_empty_error(self):
        with pytest.raises(ValueError, match="empty"):
            init_scene(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_degree_config(self):
        scene = init_scene(np.zeros((2, 3)) + [[0, 0, 0], [1, 1, 1]], np.full((2, 3), 0.5),
                           InitConfig(degree_max=2))
        assert scene.degree_max == 2
        assert scene.sh_trans.shape == (2, 3, 9)
