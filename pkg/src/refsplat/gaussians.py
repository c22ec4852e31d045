"""Dual-branch Gaussian scene parameters, activations, and camera projection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .sh import MAX_SH_DEGREE, SH_DC, num_sh_coeffs

# screen-space covariance dilation (px^2) and footprint cutoff in sigmas
COV_DILATION = 0.3
FOOTPRINT_SIGMA = 3.0

INIT_ALPHA_TRANS = 0.1
INIT_ALPHA_REF = 0.1
INIT_BETA_REF = 0.05

# trainable array fields, in checkpoint order
PARAM_FIELDS = (
    "positions",
    "rotations",
    "log_scales",
    "sh_trans",
    "sh_ref",
    "raw_alpha_trans",
    "raw_alpha_ref",
    "raw_beta_ref",
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def activate(raw: float, kind: str) -> float:
    """Map an unconstrained parameter to its constrained quantity."""
    if kind in ("opacity_trans", "opacity_ref", "beta_ref"):
        return float(sigmoid(raw))
    if kind == "scale":
        return math.exp(raw)
    raise ValueError(f"unknown activation kind {kind!r}")


@dataclass
class GaussianSet:
    """Trainable scene: positions, orientations, scales, dual SH colors,
    dual opacities, and reflection confidence."""

    positions: np.ndarray        # (N, 3)
    rotations: np.ndarray        # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray       # (N, 3)
    sh_trans: np.ndarray         # (N, 3, K)
    sh_ref: np.ndarray           # (N, 3, K)
    raw_alpha_trans: np.ndarray  # (N,)
    raw_alpha_ref: np.ndarray    # (N,)
    raw_beta_ref: np.ndarray     # (N,)

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.rotations.shape != (n, 4):
            raise ValueError("positions must be (N, 3) and rotations (N, 4)")
        if self.log_scales.shape != (n, 3):
            raise ValueError("log_scales must be (N, 3)")
        if self.sh_trans.shape != self.sh_ref.shape:
            raise ValueError("both SH sets must share one shape (and degree)")
        k = self.sh_trans.shape[-1]
        if self.sh_trans.shape != (n, 3, k):
            raise ValueError("SH coefficients must be (N, 3, K)")
        if num_sh_coeffs(self.degree_max) != k:
            raise ValueError(f"SH coefficient count {k} is not a full degree")
        for name in ("raw_alpha_trans", "raw_alpha_ref", "raw_beta_ref"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must be (N,)")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def degree_max(self) -> int:
        return int(round(math.sqrt(self.sh_trans.shape[-1]))) - 1

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).copy() for f in PARAM_FIELDS))

    def normalized_rotations(self) -> np.ndarray:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return self.rotations / norms

    def renormalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    @classmethod
    def empty(cls, degree_max: int = MAX_SH_DEGREE) -> "GaussianSet":
        k = num_sh_coeffs(degree_max)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros((0, 3, k)), np.zeros((0, 3, k)),
            np.zeros(0), np.zeros(0), np.zeros(0),
        )


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rotation must be (3, 3) and translation (3,)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation part not orthonormal (deviation {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class Splat2D:
    """A Gaussian projected to screen space."""

    mean: np.ndarray   # (2,) pixels
    cov: np.ndarray    # (2, 2) pixels^2, after low-pass dilation
    depth: float       # camera-space z
    index: int


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) wxyz to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def covariance_from(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """World covariance R S S^T R^T from a unit quaternion and scale vector."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(r)) or not np.all(np.isfinite(s)):
        raise ValueError("non-finite covariance inputs")
    if abs(np.linalg.norm(r) - 1.0) > 1e-6:
        raise ValueError("quaternion must be unit norm")
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    a = quat_to_rot(r) * s[None, :]
    return a @ a.T


@dataclass
class ProjectedScene:
    """Per-Gaussian screen-space quantities plus the intermediates the
    backward pass chains through."""

    n: int
    valid: np.ndarray       # (N,) bool, survived culling
    means2d: np.ndarray     # (N, 2)
    cov_a: np.ndarray       # (N,) screen cov [0,0]
    cov_b: np.ndarray       # (N,) screen cov [0,1]
    cov_c: np.ndarray       # (N,) screen cov [1,1]
    det: np.ndarray         # (N,)
    depth: np.ndarray       # (N,) camera z
    radius: np.ndarray      # (N,) footprint radius, px
    tcam: np.ndarray        # (N, 3)
    rot: np.ndarray         # (N, 3, 3) from normalized quaternions
    scales: np.ndarray      # (N, 3) activated
    amat: np.ndarray        # (N, 3, 3) R * diag(s)
    culled_near: int = 0
    culled_degenerate: int = 0


def project_scene(scene: GaussianSet, cam: Camera) -> ProjectedScene:
    """Project every Gaussian; invalid entries are culled, not errors."""
    n = len(scene)
    qhat = scene.normalized_rotations()
    rot = quat_to_rot(qhat)
    scales = np.exp(scene.log_scales)
    amat = rot * scales[:, None, :]

    tcam = scene.positions @ cam.rotation.T + cam.translation
    tz = tcam[:, 2]
    valid = tz > cam.near
    culled_near = int(n - valid.sum())

    safe_tz = np.where(valid, tz, 1.0)
    means2d = np.empty((n, 2))
    means2d[:, 0] = cam.fx * tcam[:, 0] / safe_tz + cam.cx
    means2d[:, 1] = cam.fy * tcam[:, 1] / safe_tz + cam.cy

    # M = W Sigma W^T with Sigma = A A^T; then 2x2 block of J M J^T
    b = cam.rotation[None, :, :] @ amat  # (N, 3, 3), rows of W applied to A
    m = b @ np.swapaxes(b, 1, 2)
    jx = cam.fx / safe_tz
    jy = cam.fy / safe_tz
    jxz = -cam.fx * tcam[:, 0] / safe_tz**2
    jyz = -cam.fy * tcam[:, 1] / safe_tz**2
    # J = [[jx, 0, jxz], [0, jy, jyz]]
    cov_a = jx * jx * m[:, 0, 0] + 2 * jx * jxz * m[:, 0, 2] + jxz * jxz * m[:, 2, 2] + COV_DILATION
    cov_b = (
        jx * jy * m[:, 0, 1]
        + jx * jyz * m[:, 0, 2]
        + jxz * jy * m[:, 1, 2]
        + jxz * jyz * m[:, 2, 2]
    )
    cov_c = jy * jy * m[:, 1, 1] + 2 * jy * jyz * m[:, 1, 2] + jyz * jyz * m[:, 2, 2] + COV_DILATION

    det = cov_a * cov_c - cov_b * cov_b
    degenerate = valid & ~((det > 0) & np.isfinite(det))
    culled_degenerate = int(degenerate.sum())
    valid = valid & ~degenerate

    mid = 0.5 * (cov_a + cov_c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))

    return ProjectedScene(
        n=n, valid=valid, means2d=means2d, cov_a=cov_a, cov_b=cov_b, cov_c=cov_c,
        det=det, depth=tz, radius=radius, tcam=tcam, rot=rot, scales=scales,
        amat=amat, culled_near=culled_near, culled_degenerate=culled_degenerate,
    )


def project_gaussian(scene: GaussianSet, index: int, cam: Camera) -> Splat2D | None:
    """Project one Gaussian; returns None when culled."""
    proj = project_scene(scene, cam)
    if not proj.valid[index]:
        return None
    cov = np.array(
        [[proj.cov_a[index], proj.cov_b[index]], [proj.cov_b[index], proj.cov_c[index]]]
    )
    return Splat2D(proj.means2d[index].copy(), cov, float(proj.depth[index]), index)


@dataclass
class InitConfig:
    degree_max: int = MAX_SH_DEGREE
    knn: int = 3
    fallback_scale: float = 0.1  # used when a lone point has no neighbors


def init_scene(points: np.ndarray, colors: np.ndarray, config: InitConfig | None = None) -> GaussianSet:
    """Initialize a scene from a point cloud with per-point RGB in [0, 1]."""
    config = config or InitConfig()
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    m = points.shape[0]
    if m == 0:
        raise ValueError("cannot initialize an empty scene")
    if points.shape != (m, 3) or colors.shape != (m, 3):
        raise ValueError("points and colors must both be (M, 3)")

    if m == 1:
        mean_dist = np.full(1, config.fallback_scale)
    else:
        k = min(config.knn, m - 1)
        tree = cKDTree(points)
        dist, _ = tree.query(points, k=k + 1)  # first neighbor is the point itself
        mean_dist = dist[:, 1:].mean(axis=1)
    mean_dist = np.maximum(mean_dist, 1e-7)
    log_scales = np.repeat(np.log(mean_dist)[:, None], 3, axis=1)

    k_coeffs = num_sh_coeffs(config.degree_max)
    sh_trans = np.zeros((m, 3, k_coeffs))
    sh_trans[:, :, 0] = (colors - 0.5) / SH_DC
    rotations = np.zeros((m, 4))
    rotations[:, 0] = 1.0

    return GaussianSet(
        positions=points.copy(),
        rotations=rotations,
        log_scales=log_scales,
        sh_trans=sh_trans,
        sh_ref=np.zeros((m, 3, k_coeffs)),
        raw_alpha_trans=np.full(m, logit(INIT_ALPHA_TRANS)),
        raw_alpha_ref=np.full(m, logit(INIT_ALPHA_REF)),
        raw_beta_ref=np.full(m, logit(INIT_BETA_REF)),
    )
