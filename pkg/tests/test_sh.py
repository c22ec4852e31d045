"""Spherical harmonics unit tests against closed-form and quadrature oracles."""
import math

import numpy as np
import pytest

from refsplat.sh import (
    MAX_SH_DEGREE,
    Direction,
    ShCoeffs,
    eval_sh_color,
    eval_sh_color_clamped,
    legendre_assoc,
    num_sh_coeffs,
    sh_basis,
    sh_basis_and_grad,
    sh_basis_matrix,
    sh_flat_index,
    sh_normalization,
)


# Closed-form associated Legendre polynomials (Condon-Shortley phase), l <= 3.
def _s(x):
    return math.sqrt(1.0 - x * x)


CLOSED_FORMS = {
    (0, 0): lambda x: 1.0,
    (1, 0): lambda x: x,
    (1, 1): lambda x: -_s(x),
    (2, 0): lambda x: 0.5 * (3 * x * x - 1),
    (2, 1): lambda x: -3.0 * x * _s(x),
    (2, 2): lambda x: 3.0 * (1 - x * x),
    (3, 0): lambda x: 0.5 * (5 * x**3 - 3 * x),
    (3, 1): lambda x: -1.5 * (5 * x * x - 1) * _s(x),
    (3, 2): lambda x: 15.0 * x * (1 - x * x),
    (3, 3): lambda x: -15.0 * (1 - x * x) ** 1.5,
}


class TestLegendre:
    def test_p00_is_one(self):
        assert legendre_assoc(0, 0, 0.3) == 1.0

    def test_seed_case_l1_m1(self):
        assert legendre_assoc(1, 1, 0.0) == -1.0

    def test_closed_form_p20(self):
        assert legendre_assoc(2, 0, 0.5) == pytest.approx(-0.125, abs=1e-15)

    def test_closed_forms_grid(self):
        xs = np.linspace(-1.0, 1.0, 100)
        for (l, m), f in CLOSED_FORMS.items():
            for x in xs:
                assert legendre_assoc(l, m, float(x)) == pytest.approx(
                    f(float(x)), abs=1e-12
                ), (l, m, x)

    def test_domain_errors(self):
        with pytest.raises(ValueError, match="outside"):
            legendre_assoc(6, 0, 0.0)
        with pytest.raises(ValueError, match="exceeds"):
            legendre_assoc(2, 3, 0.0)
        with pytest.raises(ValueError, match="nonnegative"):
            legendre_assoc(2, -1, 0.0)
        with pytest.raises(ValueError, match="outside"):
            legendre_assoc(2, 1, 1.5)


class TestNormalization:
    def test_k00(self):
        assert sh_normalization(0, 0) == pytest.approx(0.28209479177387814, abs=1e-15)

    def test_k10(self):
        assert sh_normalization(1, 0) == pytest.approx(0.4886025119029199, abs=1e-15)

    def test_k55(self):
        # sqrt(11/(4 pi) / 10!)
        expect = math.sqrt(11.0 / (4 * math.pi) / math.factorial(10))
        assert sh_normalization(5, 5) == pytest.approx(expect, rel=1e-15)
        assert sh_normalization(5, 5) == pytest.approx(4.9114518882630493e-4, rel=1e-12)

    def test_negative_m_matches_positive(self):
        for l in range(MAX_SH_DEGREE + 1):
            for m in range(l + 1):
                assert sh_normalization(l, -m) == sh_normalization(l, m)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            sh_normalization(1, 2)


class TestBasis:
    def test_constant_term(self):
        d = Direction.from_vector((0.3, -0.4, 0.86))
        assert sh_basis(0, 0, d) == pytest.approx(0.28209479177387814, abs=1e-15)

    def test_l1_m0_at_pole(self):
        d = Direction.from_vector((0.0, 0.0, 1.0))
        assert sh_basis(1, 0, d) == pytest.approx(0.4886025119029199, abs=1e-12)

    def test_l2_m1_vanishes_at_pole(self):
        d = Direction.from_vector((0.0, 0.0, 1.0))
        assert sh_basis(2, 1, d) == pytest.approx(0.0, abs=1e-15)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            Direction.from_vector((0.0, 0.0, 0.0))

    def test_phi_periodicity(self):
        # rotating phi by 2*pi leaves every basis value unchanged
        rng = np.random.default_rng(7)
        for _ in range(10):
            v = rng.normal(size=3)
            d = Direction.from_vector(v)
            theta, phi = d.theta, d.phi
            d2 = Direction(
                math.sin(theta) * math.cos(phi + 2 * math.pi),
                math.sin(theta) * math.sin(phi + 2 * math.pi),
                math.cos(theta),
            )
            for l in range(MAX_SH_DEGREE + 1):
                for m in range(-l, l + 1):
                    assert sh_basis(l, m, d2) == pytest.approx(
                        sh_basis(l, m, d), abs=1e-12
                    )

    def test_orthonormality_quadrature(self):
        # midpoint-rule quadrature; 128x256 exceeds the 64x128 floor and keeps
        # the quadrature error itself well under the 1e-3 gate
        n_t, n_p = 128, 256
        theta = (np.arange(n_t) + 0.5) * math.pi / n_t
        phi = (np.arange(n_p) + 0.5) * 2 * math.pi / n_p
        tt, pp = np.meshgrid(theta, phi, indexing="ij")
        dirs = np.stack(
            [np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1
        ).reshape(-1, 3)
        w = (np.sin(tt) * (math.pi / n_t) * (2 * math.pi / n_p)).reshape(-1)
        basis = sh_basis_matrix(dirs, MAX_SH_DEGREE)
        gram = basis.T @ (basis * w[:, None])
        np.testing.assert_allclose(gram, np.eye(num_sh_coeffs(MAX_SH_DEGREE)), atol=1e-3)

    def test_matrix_path_matches_scalar_path(self):
        rng = np.random.default_rng(11)
        dirs = rng.normal(size=(20, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        basis = sh_basis_matrix(dirs, MAX_SH_DEGREE)
        for i, v in enumerate(dirs):
            d = Direction.from_vector(v)
            for l in range(MAX_SH_DEGREE + 1):
                for m in range(-l, l + 1):
                    assert basis[i, sh_flat_index(l, m)] == pytest.approx(
                        sh_basis(l, m, d), abs=1e-12
                    )

    def test_basis_gradient_finite_difference(self):
        # gradient of the polynomial extension, checked off-sphere FD on raw coords
        rng = np.random.default_rng(13)
        dirs = rng.normal(size=(5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        basis, grad = sh_basis_and_grad(dirs, MAX_SH_DEGREE)
        h = 1e-6
        for axis in range(3):
            dp = dirs.copy()
            dm = dirs.copy()
            dp[:, axis] += h
            dm[:, axis] -= h
            fd = (sh_basis_matrix(dp, MAX_SH_DEGREE) - sh_basis_matrix(dm, MAX_SH_DEGREE)) / (
                2 * h
            )
            np.testing.assert_allclose(grad[:, :, axis], fd, atol=1e-6)


class TestEvalColor:
    def test_dc_only(self):
        c = ShCoeffs.zeros(0)
        c.coeffs[:, 0] = [1.0, 2.0, 3.0]
        d = Direction.from_vector((0.1, 0.7, -0.7))
        out = eval_sh_color(c, d, 0)
        np.testing.assert_allclose(
            out, [0.28209479177387814, 0.5641895835477563, 0.8462843753216344], atol=1e-12
        )

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(42)
        c = ShCoeffs(MAX_SH_DEGREE, rng.normal(size=(3, 36)))
        d = Direction.from_vector((0.6, 0.0, 0.8))
        out = eval_sh_color(c, d, MAX_SH_DEGREE)
        # independent brute-force double loop over (l, m)
        expect = np.zeros(3)
        for l in range(MAX_SH_DEGREE + 1):
            for m in range(-l, l + 1):
                y = sh_basis(l, m, d)
                expect += c.coeffs[:, sh_flat_index(l, m)] * y
        np.testing.assert_allclose(out, expect, atol=1e-10)

    def test_pole_depends_only_on_m0(self):
        rng = np.random.default_rng(3)
        c = ShCoeffs(MAX_SH_DEGREE, rng.normal(size=(3, 36)))
        c2 = ShCoeffs(MAX_SH_DEGREE, c.coeffs.copy())
        for l in range(MAX_SH_DEGREE + 1):
            for m in range(-l, l + 1):
                if m != 0:
                    c2.coeffs[:, sh_flat_index(l, m)] = 0.0
        d = Direction.from_vector((0.0, 0.0, 1.0))
        np.testing.assert_allclose(
            eval_sh_color(c, d, MAX_SH_DEGREE), eval_sh_color(c2, d, MAX_SH_DEGREE), atol=1e-12
        )

    def test_truncation_matches_zero_padded(self):
        rng = np.random.default_rng(5)
        c3 = ShCoeffs(3, rng.normal(size=(3, 16)))
        c4 = ShCoeffs.zeros(4)
        c4.coeffs[:, :16] = c3.coeffs
        d = Direction.from_vector((0.3, 0.5, 0.81))
        a = eval_sh_color(c3, d, 3)
        b = eval_sh_color(c4, d, 4)
        np.testing.assert_array_equal(a, b)

    def test_active_degree_error(self):
        c = ShCoeffs.zeros(2)
        with pytest.raises(ValueError, match="exceeds"):
            eval_sh_color(c, Direction.from_vector((0, 0, 1)), 3)

    def test_clamped_variant(self):
        c = ShCoeffs.zeros(0)
        c.coeffs[:, 0] = [-10.0, 0.0, 1.0]
        d = Direction.from_vector((0, 0, 1))
        out = eval_sh_color_clamped(c, d, 0)
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.5)
        assert out[2] == pytest.approx(0.5 + 0.28209479177387814)
