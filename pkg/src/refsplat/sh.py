"""Real spherical harmonics up to degree 5 via associated Legendre recurrences."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_SH_DEGREE = 5

# DC basis value Y_0^0 = 1/(2*sqrt(pi)); colors are offset by 0.5 before clamping.
SH_DC = 0.28209479177387814
COLOR_OFFSET = 0.5


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_flat_index(l: int, m: int) -> int:
    """Canonical flat index: l ascending, m from -l to +l."""
    return l * l + l + m


@dataclass(frozen=True)
class Direction:
    """Unit direction in scene coordinates."""

    x: float
    y: float
    z: float

    @classmethod
    def from_vector(cls, v) -> "Direction":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (3,):
            raise ValueError("direction must be a 3-vector")
        n = float(np.linalg.norm(v))
        if n < 1e-12:
            raise ValueError("zero-length direction cannot be normalized")
        return cls(float(v[0]) / n, float(v[1]) / n, float(v[2]) / n)

    @property
    def theta(self) -> float:
        return math.acos(min(1.0, max(-1.0, self.z)))

    @property
    def phi(self) -> float:
        return math.atan2(self.y, self.x)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass
class ShCoeffs:
    """Per-channel SH projection coefficients, channel-major, (l, m) canonical order."""

    degree_max: int
    coeffs: np.ndarray  # (3, (degree_max + 1)^2)

    def __post_init__(self):
        if not 0 <= self.degree_max <= MAX_SH_DEGREE:
            raise ValueError(f"degree_max must be in [0, {MAX_SH_DEGREE}], got {self.degree_max}")
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        want = (3, num_sh_coeffs(self.degree_max))
        if self.coeffs.shape != want:
            raise ValueError(f"coeffs shape {self.coeffs.shape} does not match {want}")

    @classmethod
    def zeros(cls, degree_max: int) -> "ShCoeffs":
        return cls(degree_max, np.zeros((3, num_sh_coeffs(degree_max))))


def _check_lm(l: int, m: int) -> None:
    if not 0 <= l <= MAX_SH_DEGREE:
        raise ValueError(f"degree l={l} outside [0, {MAX_SH_DEGREE}]")
    if abs(m) > l:
        raise ValueError(f"order |m|={abs(m)} exceeds degree l={l}")


def legendre_assoc(l: int, m: int, x: float) -> float:
    """Associated Legendre P_l^m(x) with Condon-Shortley phase.

    Three-part recurrence: diagonal seed P_m^m = (-1)^m (2m-1)!! (1-x^2)^{m/2},
    one-step lift P_{m+1}^m = x (2m+1) P_m^m, then the recurrence in l.
    """
    _check_lm(l, m)
    if m < 0:
        raise ValueError(f"order m={m} must be nonnegative")
    if not -1.0 <= x <= 1.0:
        raise ValueError(f"argument x={x} outside [-1, 1]")
    pmm = 1.0
    if m > 0:
        somx2 = math.sqrt((1.0 - x) * (1.0 + x))
        fact = 1.0
        for _ in range(m):
            pmm *= -fact * somx2
            fact += 2.0
    if l == m:
        return pmm
    pmmp1 = x * (2.0 * m + 1.0) * pmm
    if l == m + 1:
        return pmmp1
    pll = 0.0
    for ll in range(m + 2, l + 1):
        pll = (x * (2.0 * ll - 1.0) * pmmp1 - (ll + m - 1.0) * pmm) / (ll - m)
        pmm = pmmp1
        pmmp1 = pll
    return pll


def sh_normalization(l: int, m: int) -> float:
    """Normalization K_l^m = sqrt((2l+1)/(4 pi) * (l-|m|)!/(l+|m|)!)."""
    _check_lm(l, m)
    m = abs(m)
    return math.sqrt(
        (2.0 * l + 1.0) / (4.0 * math.pi) * math.factorial(l - m) / math.factorial(l + m)
    )


_SQRT2 = math.sqrt(2.0)


def sh_basis(l: int, m: int, direction: Direction) -> float:
    """Real SH basis function Y_l^m evaluated at a unit direction."""
    _check_lm(l, m)
    theta = direction.theta
    phi = direction.phi
    ct = math.cos(theta)
    if m > 0:
        return _SQRT2 * sh_normalization(l, m) * math.cos(m * phi) * legendre_assoc(l, m, ct)
    if m < 0:
        return _SQRT2 * sh_normalization(l, m) * math.sin(-m * phi) * legendre_assoc(l, -m, ct)
    return sh_normalization(l, 0) * legendre_assoc(l, 0, ct)


def eval_sh_color(coeffs: ShCoeffs, direction: Direction, active_degree: int) -> np.ndarray:
    """Raw (unclamped) RGB from SH coefficients for a view direction."""
    if active_degree > coeffs.degree_max:
        raise ValueError(
            f"active_degree {active_degree} exceeds stored degree {coeffs.degree_max}"
        )
    basis = sh_basis_matrix(direction.as_array()[None, :], active_degree)[0]
    k = num_sh_coeffs(active_degree)
    return coeffs.coeffs[:, :k] @ basis


def eval_sh_color_clamped(coeffs: ShCoeffs, direction: Direction, active_degree: int) -> np.ndarray:
    """Renderer-facing color: raw SH value offset by 0.5, clamped to >= 0."""
    return np.maximum(eval_sh_color(coeffs, direction, active_degree) + COLOR_OFFSET, 0.0)


# -- Vectorized basis used by the renderer ------------------------------------
#
# On the unit sphere, cos(m phi) sin^m(theta) and sin(m phi) sin^m(theta) are
# Re/Im of (x + iy)^m, and P_l^m(z) factors as sin^m(theta) * G_l^m(z) with
# G polynomial in z. That turns every basis function into a polynomial in
# (x, y, z), smooth at the poles, with closed-form derivatives.

def _k_table(degree: int) -> list[list[float]]:
    return [[sh_normalization(l, m) for m in range(l + 1)] for l in range(degree + 1)]


_KTAB = _k_table(MAX_SH_DEGREE)


def _double_factorial(n: int) -> float:
    out = 1.0
    while n > 1:
        out *= n
        n -= 2
    return out


def sh_basis_matrix(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values for unit directions, shape (N, (degree+1)^2)."""
    basis, _ = _basis_impl(np.asarray(dirs, dtype=np.float64), degree, want_grad=False)
    return basis


def sh_basis_and_grad(dirs: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and their gradients w.r.t. the (extended) direction coords.

    Returns (basis (N, K), dbasis (N, K, 3)). The gradient is of the polynomial
    extension; project onto the sphere tangent before chaining through a
    normalization.
    """
    basis, grad = _basis_impl(np.asarray(dirs, dtype=np.float64), degree, want_grad=True)
    return basis, grad


def _basis_impl(dirs: np.ndarray, degree: int, want_grad: bool):
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"degree {degree} outside [0, {MAX_SH_DEGREE}]")
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    k = num_sh_coeffs(degree)
    basis = np.empty((n, k))
    grad = np.zeros((n, k, 3)) if want_grad else None

    # A_m + i B_m = (x + iy)^m
    a = [np.ones(n)]
    b = [np.zeros(n)]
    for m in range(1, degree + 1):
        a_prev, b_prev = a[-1], b[-1]
        a.append(a_prev * x - b_prev * y)
        b.append(a_prev * y + b_prev * x)

    # G_l^m(z) per m: seed, lift, l-recurrence; gp holds dG/dz.
    for m in range(0, degree + 1):
        seed = ((-1.0) ** m) * _double_factorial(2 * m - 1)
        g = {m: np.full(n, seed)}
        gp = {m: np.zeros(n)}
        if m + 1 <= degree:
            g[m + 1] = z * (2 * m + 1) * g[m]
            gp[m + 1] = (2 * m + 1) * g[m]
        for l in range(m + 2, degree + 1):
            g[l] = (z * (2 * l - 1) * g[l - 1] - (l + m - 1) * g[l - 2]) / (l - m)
            gp[l] = ((2 * l - 1) * (g[l - 1] + z * gp[l - 1]) - (l + m - 1) * gp[l - 2]) / (l - m)
        for l in range(m, degree + 1):
            kk = _KTAB[l][m]
            if m == 0:
                idx = sh_flat_index(l, 0)
                basis[:, idx] = kk * g[l]
                if want_grad:
                    grad[:, idx, 2] = kk * gp[l]
            else:
                c = _SQRT2 * kk
                ip = sh_flat_index(l, m)
                im = sh_flat_index(l, -m)
                basis[:, ip] = c * a[m] * g[l]
                basis[:, im] = c * b[m] * g[l]
                if want_grad:
                    grad[:, ip, 0] = c * m * a[m - 1] * g[l]
                    grad[:, ip, 1] = c * (-m) * b[m - 1] * g[l]
                    grad[:, ip, 2] = c * a[m] * gp[l]
                    grad[:, im, 0] = c * m * b[m - 1] * g[l]
                    grad[:, im, 1] = c * m * a[m - 1] * g[l]
                    grad[:, im, 2] = c * b[m] * gp[l]
    return basis, grad
