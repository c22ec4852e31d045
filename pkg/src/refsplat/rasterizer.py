"""Tile-based dual-branch rasterizer: forward, analytic backward, reference
compositor, and mask-scoped reflection editing.

Per pixel, splats sorted front-to-back contribute through three chains:
an alpha-composited transmitted color chain (which also carries coverage,
depth, and the background), an independent reflected color chain, and a
reflection-map chain driven by the per-Gaussian reflection confidence.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gaussians import Camera, GaussianSet, project_scene, sigmoid
from .sh import num_sh_coeffs, sh_basis_and_grad, sh_basis_matrix

TILE = 16
WEIGHT_CLAMP = 0.99       # per-splat gaussian weight cap
WEIGHT_SKIP = 1.0 / 255.0  # splats below this weight do not contribute at a pixel
TERMINATE_T = 1e-4        # stop a pixel once transmitted transmittance drops below
COVERAGE_EPS = 1e-4       # depth is emitted only where coverage exceeds this


def resolve_threads() -> int:
    """Worker cap from REFSPLAT_THREADS (0 or unset = auto)."""
    raw = os.environ.get("REFSPLAT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 0:
        n = 0
    if n == 0:
        # auto: the per-tile work is already vectorized; a single worker wins
        return 1
    return min(n, os.cpu_count() or 1)


@dataclass
class RenderOutputs:
    """All per-pixel buffers of one render."""

    image: np.ndarray        # (H, W, 3) fused, clamped to [0, 1]
    image_pre: np.ndarray    # (H, W, 3) fused, before the clamp
    color_trans: np.ndarray  # (H, W, 3)
    color_ref: np.ndarray    # (H, W, 3)
    ref_map: np.ndarray      # (H, W)
    trans_map: np.ndarray    # (H, W), defined as 1 - ref_map
    image_trans: np.ndarray  # (H, W, 3) trans_map * color_trans
    image_ref: np.ndarray    # (H, W, 3) ref_map * color_ref
    depth: np.ndarray        # (H, W)
    coverage: np.ndarray     # (H, W)
    active_sh_degree: int
    background: np.ndarray
    early_termination: bool
    culled_near: int = 0
    culled_degenerate: int = 0


@dataclass
class ParamGradients:
    """Accumulated loss gradients, shaped like the trainable fields."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    sh_trans: np.ndarray
    sh_ref: np.ndarray
    raw_alpha_trans: np.ndarray
    raw_alpha_ref: np.ndarray
    raw_beta_ref: np.ndarray

    @classmethod
    def zeros_like(cls, scene: GaussianSet) -> "ParamGradients":
        return cls(
            np.zeros_like(scene.positions),
            np.zeros_like(scene.rotations),
            np.zeros_like(scene.log_scales),
            np.zeros_like(scene.sh_trans),
            np.zeros_like(scene.sh_ref),
            np.zeros_like(scene.raw_alpha_trans),
            np.zeros_like(scene.raw_alpha_ref),
            np.zeros_like(scene.raw_beta_ref),
        )


@dataclass
class UpstreamGradients:
    """Per-buffer loss gradients fed into the backward pass; None means zero."""

    d_image: np.ndarray | None = None
    d_image_trans: np.ndarray | None = None
    d_image_ref: np.ndarray | None = None
    d_color_trans: np.ndarray | None = None
    d_color_ref: np.ndarray | None = None
    d_ref_map: np.ndarray | None = None
    d_depth: np.ndarray | None = None
    d_coverage: np.ndarray | None = None


@dataclass
class EditSpec:
    """Mask-scoped scaling of the reflected branch at fusion time."""

    mask: np.ndarray  # (H, W) soft weights in [0, 1]
    scale: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.scale < 0:
            raise ValueError("edit scale must be nonnegative")


@dataclass
class _Prep:
    """Depth-sorted, culled splat arrays shared by all render paths."""

    idx: np.ndarray      # (S,) original Gaussian indices, depth order
    u: np.ndarray        # (S,)
    v: np.ndarray
    ia: np.ndarray       # (S,) inverse screen covariance [0,0]
    ib: np.ndarray       # [0,1]
    ic: np.ndarray       # [1,1]
    cov_a: np.ndarray    # (S,) screen covariance [0,0]
    cov_b: np.ndarray
    cov_c: np.ndarray
    det: np.ndarray
    depth: np.ndarray
    alpha_t: np.ndarray
    alpha_r: np.ndarray
    beta: np.ndarray
    color_t: np.ndarray  # (S, 3) clamped SH colors
    color_r: np.ndarray
    x0: np.ndarray       # (S,) inclusive pixel bbox
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    proj: object
    basis: np.ndarray    # (S, K_active)
    raw_color_t: np.ndarray  # (S, 3) before the >= 0 clamp
    raw_color_r: np.ndarray
    ndirs: np.ndarray    # (S, 3) unit view directions
    vnorm: np.ndarray    # (S,) length of the unnormalized direction
    culled_near: int
    culled_degenerate: int


def _prepare(scene: GaussianSet, cam: Camera, active_sh_degree: int) -> _Prep:
    if active_sh_degree > scene.degree_max:
        raise ValueError(
            f"active_sh_degree {active_sh_degree} exceeds scene degree {scene.degree_max}"
        )
    proj = project_scene(scene, cam)
    cand = np.flatnonzero(proj.valid)

    u = proj.means2d[cand, 0]
    v = proj.means2d[cand, 1]
    r = proj.radius[cand]
    x0 = np.ceil(u - r - 0.5).astype(int)
    x1 = np.floor(u + r - 0.5).astype(int)
    y0 = np.ceil(v - r - 0.5).astype(int)
    y1 = np.floor(v + r - 0.5).astype(int)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x1, cam.width - 1)
    y1 = np.minimum(y1, cam.height - 1)
    on = (x0 <= x1) & (y0 <= y1)
    cand = cand[on]

    # global front-to-back order, stable with index tie-break
    order = np.argsort(proj.depth[cand], kind="stable")
    idx = cand[order]

    det = proj.det[idx]
    k = num_sh_coeffs(active_sh_degree)
    dirs = scene.positions[idx] - cam.center[None, :]
    vnorm = np.linalg.norm(dirs, axis=1)
    ndirs = dirs / vnorm[:, None]
    basis = sh_basis_matrix(ndirs, active_sh_degree)
    raw_t = np.einsum("sck,sk->sc", scene.sh_trans[idx, :, :k], basis) + 0.5
    raw_r = np.einsum("sck,sk->sc", scene.sh_ref[idx, :, :k], basis) + 0.5

    return _Prep(
        idx=idx,
        u=proj.means2d[idx, 0],
        v=proj.means2d[idx, 1],
        ia=proj.cov_c[idx] / det,
        ib=-proj.cov_b[idx] / det,
        ic=proj.cov_a[idx] / det,
        cov_a=proj.cov_a[idx],
        cov_b=proj.cov_b[idx],
        cov_c=proj.cov_c[idx],
        det=det,
        depth=proj.depth[idx],
        alpha_t=sigmoid(scene.raw_alpha_trans[idx]),
        alpha_r=sigmoid(scene.raw_alpha_ref[idx]),
        beta=sigmoid(scene.raw_beta_ref[idx]),
        color_t=np.maximum(raw_t, 0.0),
        color_r=np.maximum(raw_r, 0.0),
        x0=x0[on][order], x1=x1[on][order], y0=y0[on][order], y1=y1[on][order],
        proj=proj,
        basis=basis,
        raw_color_t=raw_t,
        raw_color_r=raw_r,
        ndirs=ndirs,
        vnorm=vnorm,
        culled_near=proj.culled_near,
        culled_degenerate=proj.culled_degenerate,
    )


def _tile_bounds(width: int, height: int):
    tiles = []
    for ty in range(0, height, TILE):
        for tx in range(0, width, TILE):
            tiles.append((tx, ty, min(tx + TILE, width), min(ty + TILE, height)))
    return tiles


def _tile_weights(prep: _Prep, cand: np.ndarray, jj: np.ndarray, ii: np.ndarray,
                  early_termination: bool):
    """Per-splat, per-pixel chain inputs for one tile.

    Returns (a_t, a_r, bet, g, geff, active) with shape (S, P); `active`
    marks splats that contribute (inside bbox, above the weight skip, and
    before the pixel's termination point).
    """
    xs = jj + 0.5
    ys = ii + 0.5
    dx = xs[None, :] - prep.u[cand, None]
    dy = ys[None, :] - prep.v[cand, None]
    inside = (
        (jj[None, :] >= prep.x0[cand, None])
        & (jj[None, :] <= prep.x1[cand, None])
        & (ii[None, :] >= prep.y0[cand, None])
        & (ii[None, :] <= prep.y1[cand, None])
    )
    q = (
        prep.ia[cand, None] * dx * dx
        + 2.0 * prep.ib[cand, None] * dx * dy
        + prep.ic[cand, None] * dy * dy
    )
    g = np.exp(-0.5 * q)
    geff = np.minimum(g, WEIGHT_CLAMP)
    contrib = inside & (g >= WEIGHT_SKIP)

    a_t0 = prep.alpha_t[cand, None] * geff * contrib
    if early_termination:
        t_incl = np.cumprod(1.0 - a_t0, axis=0)
        t_excl = np.empty_like(t_incl)
        t_excl[0] = 1.0
        t_excl[1:] = t_incl[:-1]
        keep = t_excl >= TERMINATE_T
        active = contrib & keep
    else:
        active = contrib
    a_t = prep.alpha_t[cand, None] * geff * active
    a_r = prep.alpha_r[cand, None] * geff * active
    bet = prep.beta[cand, None] * active
    return a_t, a_r, bet, g, geff, active, dx, dy, q


def _chain(a: np.ndarray):
    """Exclusive/inclusive transmittance for a front-to-back opacity stack."""
    t_incl = np.cumprod(1.0 - a, axis=0)
    t_excl = np.empty_like(t_incl)
    t_excl[0] = 1.0
    t_excl[1:] = t_incl[:-1]
    return t_excl, t_incl


def _tile_forward(prep: _Prep, cand: np.ndarray, jj, ii, background, early_termination):
    p = jj.shape[0]
    if cand.size == 0:
        return {
            "color_t": np.tile(background, (p, 1)),
            "color_r": np.zeros((p, 3)),
            "ref_map": np.zeros(p),
            "depth": np.zeros(p),
            "coverage": np.zeros(p),
        }
    a_t, a_r, bet, _, _, _, _, _, _ = _tile_weights(prep, cand, jj, ii, early_termination)
    t_excl, t_incl = _chain(a_t)
    w_t = a_t * t_excl
    color_t = np.einsum("sp,sc->pc", w_t, prep.color_t[cand])
    t_final = t_incl[-1]
    color_t += t_final[:, None] * background[None, :]
    coverage = w_t.sum(axis=0)
    depth_acc = (w_t * prep.depth[cand, None]).sum(axis=0)
    covered = coverage > COVERAGE_EPS
    depth = np.where(covered, depth_acc / np.where(covered, coverage, 1.0), 0.0)

    tr_excl, _ = _chain(a_r)
    w_r = a_r * tr_excl
    color_r = np.einsum("sp,sc->pc", w_r, prep.color_r[cand])

    tb_excl, _ = _chain(bet)
    ref_map = (bet * a_t * tb_excl).sum(axis=0)

    return {
        "color_t": color_t,
        "color_r": color_r,
        "ref_map": ref_map,
        "depth": depth,
        "coverage": coverage,
    }


def _tile_grid(tx, ty, tx1, ty1):
    jj, ii = np.meshgrid(np.arange(tx, tx1), np.arange(ty, ty1), indexing="xy")
    return jj.ravel().astype(np.float64), ii.ravel().astype(np.float64)


def _candidates(prep: _Prep, tx, ty, tx1, ty1):
    return np.flatnonzero(
        (prep.x0 <= tx1 - 1) & (prep.x1 >= tx) & (prep.y0 <= ty1 - 1) & (prep.y1 >= ty)
    )


def render_forward(
    scene: GaussianSet,
    cam: Camera,
    active_sh_degree: int,
    background,
    early_termination: bool = True,
) -> RenderOutputs:
    """Render every output buffer for one camera."""
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (3,):
        raise ValueError("background must be an RGB triple")
    h, w = cam.height, cam.width

    color_trans = np.zeros((h, w, 3))
    color_ref = np.zeros((h, w, 3))
    ref_map = np.zeros((h, w))
    depth = np.zeros((h, w))
    coverage = np.zeros((h, w))

    if len(scene) > 0:
        prep = _prepare(scene, cam, active_sh_degree)
        culled_near, culled_degenerate = prep.culled_near, prep.culled_degenerate
        tiles = _tile_bounds(w, h)

        def run(tile):
            tx, ty, tx1, ty1 = tile
            jj, ii = _tile_grid(tx, ty, tx1, ty1)
            cand = _candidates(prep, tx, ty, tx1, ty1)
            return _tile_forward(prep, cand, jj, ii, background, early_termination)

        workers = resolve_threads()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(run, tiles))
        else:
            results = [run(t) for t in tiles]
        for (tx, ty, tx1, ty1), res in zip(tiles, results):
            sh = (ty1 - ty, tx1 - tx)
            color_trans[ty:ty1, tx:tx1] = res["color_t"].reshape(sh + (3,))
            color_ref[ty:ty1, tx:tx1] = res["color_r"].reshape(sh + (3,))
            ref_map[ty:ty1, tx:tx1] = res["ref_map"].reshape(sh)
            depth[ty:ty1, tx:tx1] = res["depth"].reshape(sh)
            coverage[ty:ty1, tx:tx1] = res["coverage"].reshape(sh)
    else:
        color_trans[:] = background[None, None, :]
        culled_near = culled_degenerate = 0

    trans_map = 1.0 - ref_map
    image_trans = trans_map[:, :, None] * color_trans
    image_ref = ref_map[:, :, None] * color_ref
    image_pre = image_trans + image_ref
    image = np.clip(image_pre, 0.0, 1.0)

    return RenderOutputs(
        image=image, image_pre=image_pre, color_trans=color_trans, color_ref=color_ref,
        ref_map=ref_map, trans_map=trans_map, image_trans=image_trans,
        image_ref=image_ref, depth=depth, coverage=coverage,
        active_sh_degree=active_sh_degree, background=background,
        early_termination=early_termination,
        culled_near=culled_near, culled_degenerate=culled_degenerate,
    )


def render_edited(
    scene: GaussianSet,
    cam: Camera,
    active_sh_degree: int,
    background,
    edit: EditSpec,
) -> RenderOutputs:
    """Forward render with the reflected branch scaled inside the edit mask."""
    if edit.scale < 0:
        raise ValueError("edit scale must be nonnegative")
    out = render_forward(scene, cam, active_sh_degree, background)
    if edit.mask.shape != out.ref_map.shape:
        raise ValueError(
            f"edit mask shape {edit.mask.shape} does not match render {out.ref_map.shape}"
        )
    s_eff = 1.0 + (edit.scale - 1.0) * edit.mask
    out.image_pre = out.image_trans + s_eff[:, :, None] * out.image_ref
    out.image = np.clip(out.image_pre, 0.0, 1.0)
    return out


# -- Reference per-pixel compositor (testing oracle) ---------------------------

@dataclass
class PixelSplat:
    """One splat's contribution terms at a single pixel, front-to-back order."""

    a_trans: float
    a_ref: float
    beta: float
    color_trans: tuple
    color_ref: tuple
    depth: float


@dataclass
class PixelOutputs:
    image: np.ndarray
    color_trans: np.ndarray
    color_ref: np.ndarray
    ref_map: float
    trans_map: float
    image_trans: np.ndarray
    image_ref: np.ndarray
    depth: float
    coverage: float


def reference_composite(splats, background=(0.0, 0.0, 0.0)) -> PixelOutputs:
    """Scalar re-implementation of the per-pixel compositing math.

    No tiling, no early termination; extended-precision accumulators.
    """
    ld = np.longdouble
    ct = [ld(0), ld(0), ld(0)]
    cr = [ld(0), ld(0), ld(0)]
    t_t = ld(1)
    t_r = ld(1)
    t_b = ld(1)
    m = ld(0)
    cov = ld(0)
    dep = ld(0)
    for s in splats:
        w_t = ld(s.a_trans) * t_t
        for c in range(3):
            ct[c] += w_t * ld(s.color_trans[c])
        cov += w_t
        dep += w_t * ld(s.depth)
        t_t *= ld(1) - ld(s.a_trans)

        w_r = ld(s.a_ref) * t_r
        for c in range(3):
            cr[c] += w_r * ld(s.color_ref[c])
        t_r *= ld(1) - ld(s.a_ref)

        m += ld(s.beta) * ld(s.a_trans) * t_b
        t_b *= ld(1) - ld(s.beta)
    for c in range(3):
        ct[c] += t_t * ld(background[c])
    depth = float(dep / cov) if cov > COVERAGE_EPS else 0.0
    m_f = float(m)
    color_t = np.array([float(x) for x in ct])
    color_r = np.array([float(x) for x in cr])
    image_trans = (1.0 - m_f) * color_t
    image_ref = m_f * color_r
    image = np.clip(image_trans + image_ref, 0.0, 1.0)
    return PixelOutputs(
        image=image, color_trans=color_t, color_ref=color_r, ref_map=m_f,
        trans_map=1.0 - m_f, image_trans=image_trans, image_ref=image_ref,
        depth=depth, coverage=float(cov),
    )


def reference_render(scene: GaussianSet, cam: Camera, active_sh_degree: int, background) -> RenderOutputs:
    """Full-image oracle: per-pixel scalar compositing over the same splat set."""
    background = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    out = RenderOutputs(
        image=np.zeros((h, w, 3)), image_pre=np.zeros((h, w, 3)),
        color_trans=np.zeros((h, w, 3)), color_ref=np.zeros((h, w, 3)),
        ref_map=np.zeros((h, w)), trans_map=np.ones((h, w)),
        image_trans=np.zeros((h, w, 3)), image_ref=np.zeros((h, w, 3)),
        depth=np.zeros((h, w)), coverage=np.zeros((h, w)),
        active_sh_degree=active_sh_degree, background=background,
        early_termination=False,
    )
    prep = _prepare(scene, cam, active_sh_degree) if len(scene) else None
    for i in range(h):
        for j in range(w):
            splats = []
            if prep is not None:
                for s in range(prep.idx.size):
                    if not (prep.x0[s] <= j <= prep.x1[s] and prep.y0[s] <= i <= prep.y1[s]):
                        continue
                    dx = j + 0.5 - prep.u[s]
                    dy = i + 0.5 - prep.v[s]
                    q = prep.ia[s] * dx * dx + 2 * prep.ib[s] * dx * dy + prep.ic[s] * dy * dy
                    g = np.exp(-0.5 * q)
                    if g < WEIGHT_SKIP:
                        continue
                    geff = min(g, WEIGHT_CLAMP)
                    splats.append(
                        PixelSplat(
                            a_trans=prep.alpha_t[s] * geff,
                            a_ref=prep.alpha_r[s] * geff,
                            beta=prep.beta[s],
                            color_trans=tuple(prep.color_t[s]),
                            color_ref=tuple(prep.color_r[s]),
                            depth=prep.depth[s],
                        )
                    )
            px = reference_composite(splats, background)
            out.image[i, j] = px.image
            out.color_trans[i, j] = px.color_trans
            out.color_ref[i, j] = px.color_ref
            out.ref_map[i, j] = px.ref_map
            out.trans_map[i, j] = px.trans_map
            out.image_trans[i, j] = px.image_trans
            out.image_ref[i, j] = px.image_ref
            out.depth[i, j] = px.depth
            out.coverage[i, j] = px.coverage
    out.image_pre = out.image_trans + out.image_ref
    return out


# -- Analytic backward ----------------------------------------------------------

def _suffix_tail(values: np.ndarray) -> np.ndarray:
    """tail[s] = sum_{k > s} values[k], along axis 0."""
    rev = np.cumsum(values[::-1], axis=0)[::-1]
    tail = np.empty_like(rev)
    tail[:-1] = rev[1:]
    tail[-1] = 0.0
    return tail


def _tile_backward(prep: _Prep, cand, jj, ii, background, early_termination, up):
    """Per-splat gradient partials for one tile.

    `up` carries the tile-flattened upstream pixel gradients:
    dct (P, 3), dcr (P, 3), dm (P,), d_acc (P,), d_cov (P,).
    Returns per-candidate reductions over the tile's pixels.
    """
    a_t, a_r, bet, g, geff, active, dx, dy, q = _tile_weights(
        prep, cand, jj, ii, early_termination
    )
    dct, dcr, dm, d_acc, d_cov = up

    t_excl, t_incl = _chain(a_t)
    w_t = a_t * t_excl
    tr_excl, _ = _chain(a_r)
    w_r = a_r * tr_excl
    tb_excl, _ = _chain(bet)

    ct = prep.color_t[cand]  # (S, 3)
    cr = prep.color_r[cand]
    dep = prep.depth[cand]

    # transmitted chain: color (incl. background), coverage, depth accumulator
    cw = w_t[:, :, None] * ct[:, None, :]  # (S, P, 3)
    tail_c = _suffix_tail(cw) + (t_incl[-1][:, None] * background[None, :])[None, :, :]
    inv_om_t = 1.0 / (1.0 - a_t)
    da_t = np.einsum(
        "pc,spc->sp", dct, t_excl[:, :, None] * ct[:, None, :] - tail_c * inv_om_t[:, :, None]
    )
    tail_v = _suffix_tail(w_t)
    da_t += d_cov[None, :] * (t_excl - tail_v * inv_om_t)
    tail_a = _suffix_tail(w_t * dep[:, None])
    da_t += d_acc[None, :] * (t_excl * dep[:, None] - tail_a * inv_om_t)
    d_depth_splat = (d_acc[None, :] * w_t).sum(axis=1)
    dcolor_t = np.einsum("pc,sp->sc", dct, w_t)

    # reflected chain (independent transmittance, no background)
    crw = w_r[:, :, None] * cr[:, None, :]
    tail_cr = _suffix_tail(crw)
    inv_om_r = 1.0 / (1.0 - a_r)
    da_r = np.einsum(
        "pc,spc->sp", dcr, tr_excl[:, :, None] * cr[:, None, :] - tail_cr * inv_om_r[:, :, None]
    )
    dcolor_r = np.einsum("pc,sp->sc", dcr, w_r)

    # reflection-map chain
    m_terms = bet * a_t * tb_excl
    tail_m = _suffix_tail(m_terms)
    dbeta_px = dm[None, :] * (tb_excl * a_t - tail_m / (1.0 - bet))
    da_t += dm[None, :] * tb_excl * bet

    # chain to activations / gaussian weight; the weight clamp blocks gradient
    dalpha_t = (da_t * geff * active).sum(axis=1)
    dalpha_r = (da_r * geff * active).sum(axis=1)
    dbeta = (dbeta_px * active).sum(axis=1)
    dgeff = (da_t * prep.alpha_t[cand, None] + da_r * prep.alpha_r[cand, None]) * active
    dq = -0.5 * g * dgeff * (g < WEIGHT_CLAMP)

    ia = prep.ia[cand, None]
    ib = prep.ib[cand, None]
    ic = prep.ic[cand, None]
    du = (-(2.0 * ia * dx + 2.0 * ib * dy) * dq).sum(axis=1)
    dv = (-(2.0 * ib * dx + 2.0 * ic * dy) * dq).sum(axis=1)
    # covariance-entry gradients via q = (c dx^2 - 2 b dx dy + a dy^2) / det
    det = prep.det[cand, None]
    ca = prep.cov_a[cand, None]
    cb = prep.cov_b[cand, None]
    cc = prep.cov_c[cand, None]
    dcov_a = (dq * (dy * dy - q * cc) / det).sum(axis=1)
    dcov_b = (dq * 2.0 * (q * cb - dx * dy) / det).sum(axis=1)
    dcov_c = (dq * (dx * dx - q * ca) / det).sum(axis=1)

    return {
        "du": du, "dv": dv,
        "dcov_a": dcov_a, "dcov_b": dcov_b, "dcov_c": dcov_c,
        "dalpha_t": dalpha_t, "dalpha_r": dalpha_r, "dbeta": dbeta,
        "dcolor_t": dcolor_t, "dcolor_r": dcolor_r, "ddepth": d_depth_splat,
    }


_ACC_KEYS = ("du", "dv", "dcov_a", "dcov_b", "dcov_c",
             "dalpha_t", "dalpha_r", "dbeta", "ddepth")


def render_backward(
    scene: GaussianSet,
    cam: Camera,
    outputs: RenderOutputs,
    upstream: UpstreamGradients,
) -> ParamGradients:
    """Analytic gradients of the loss w.r.t. every trainable parameter.

    `outputs` must come from a matching render_forward call; the per-tile
    chains are recomputed rather than stored. Tile partials merge in a fixed
    order so repeated runs are bit-identical.
    """
    h, w = cam.height, cam.width
    if outputs.image.shape != (h, w, 3):
        raise ValueError("forward outputs do not match the camera dimensions")
    degree = outputs.active_sh_degree
    if degree > scene.degree_max:
        raise ValueError("forward outputs carry a higher SH degree than the scene")
    background = outputs.background

    grads = ParamGradients.zeros_like(scene)
    if len(scene) == 0:
        return grads
    prep = _prepare(scene, cam, degree)
    s_total = prep.idx.size
    if s_total == 0:
        return grads

    def buf3(x):
        if x is None:
            return np.zeros((h, w, 3))
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (h, w, 3):
            raise ValueError("upstream gradient buffer has a mismatched shape")
        return x

    def buf1(x):
        if x is None:
            return np.zeros((h, w))
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (h, w):
            raise ValueError("upstream gradient buffer has a mismatched shape")
        return x

    # aggregate the upstream buffers onto the raw compositor outputs
    clamp_pass = (outputs.image_pre > 0.0) & (outputs.image_pre < 1.0)
    d_ipre = buf3(upstream.d_image) * clamp_pass
    d_it = buf3(upstream.d_image_trans) + d_ipre
    d_ir = buf3(upstream.d_image_ref) + d_ipre
    dct_full = buf3(upstream.d_color_trans) + d_it * outputs.trans_map[:, :, None]
    dcr_full = buf3(upstream.d_color_ref) + d_ir * outputs.ref_map[:, :, None]
    dm_full = buf1(upstream.d_ref_map) + (
        d_ir * outputs.color_ref - d_it * outputs.color_trans
    ).sum(axis=2)
    d_depth = buf1(upstream.d_depth)
    covered = outputs.coverage > COVERAGE_EPS
    safe_cov = np.where(covered, outputs.coverage, 1.0)
    d_acc_full = np.where(covered, d_depth / safe_cov, 0.0)
    d_cov_full = buf1(upstream.d_coverage) + np.where(
        covered, -d_depth * outputs.depth / safe_cov, 0.0
    )

    acc = {k: np.zeros(s_total) for k in _ACC_KEYS}
    acc_color_t = np.zeros((s_total, 3))
    acc_color_r = np.zeros((s_total, 3))

    tiles = _tile_bounds(w, h)

    def run(tile):
        tx, ty, tx1, ty1 = tile
        cand = _candidates(prep, tx, ty, tx1, ty1)
        if cand.size == 0:
            return None
        jj, ii = _tile_grid(tx, ty, tx1, ty1)
        up = (
            dct_full[ty:ty1, tx:tx1].reshape(-1, 3),
            dcr_full[ty:ty1, tx:tx1].reshape(-1, 3),
            dm_full[ty:ty1, tx:tx1].reshape(-1),
            d_acc_full[ty:ty1, tx:tx1].reshape(-1),
            d_cov_full[ty:ty1, tx:tx1].reshape(-1),
        )
        return cand, _tile_backward(prep, cand, jj, ii, background,
                                    outputs.early_termination, up)

    workers = resolve_threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, tiles))
    else:
        results = [run(t) for t in tiles]
    for res in results:  # fixed tile order keeps the reduction deterministic
        if res is None:
            continue
        cand, part = res
        for k in _ACC_KEYS:
            acc[k][cand] += part[k]
        acc_color_t[cand] += part["dcolor_t"]
        acc_color_r[cand] += part["dcolor_r"]

    _geometry_backward(scene, cam, prep, degree, acc, acc_color_t, acc_color_r, grads)
    return grads


def _geometry_backward(scene, cam, prep, degree, acc, acc_color_t, acc_color_r, grads):
    """Chain per-splat screen/color gradients back to the raw parameters."""
    idx = prep.idx
    proj = prep.proj
    k = num_sh_coeffs(degree)

    # SH colors: clamp subgradient, then coefficients and view direction
    pass_t = prep.raw_color_t > 0.0
    pass_r = prep.raw_color_r > 0.0
    draw_t = acc_color_t * pass_t
    draw_r = acc_color_r * pass_r
    grads.sh_trans[idx, :, :k] += draw_t[:, :, None] * prep.basis[:, None, :]
    grads.sh_ref[idx, :, :k] += draw_r[:, :, None] * prep.basis[:, None, :]

    _, dbasis = sh_basis_and_grad(prep.ndirs, degree)
    dy_coef = np.einsum("sc,sck->sk", draw_t, scene.sh_trans[idx, :, :k]) + np.einsum(
        "sc,sck->sk", draw_r, scene.sh_ref[idx, :, :k]
    )
    dn = np.einsum("sk,skx->sx", dy_coef, dbasis)
    # project onto the sphere tangent and undo the normalization
    dn_tan = (dn - (dn * prep.ndirs).sum(axis=1, keepdims=True) * prep.ndirs)
    dmu = dn_tan / prep.vnorm[:, None]

    # activations
    a_t = prep.alpha_t
    a_r = prep.alpha_r
    bet = prep.beta
    grads.raw_alpha_trans[idx] += acc["dalpha_t"] * a_t * (1.0 - a_t)
    grads.raw_alpha_ref[idx] += acc["dalpha_r"] * a_r * (1.0 - a_r)
    grads.raw_beta_ref[idx] += acc["dbeta"] * bet * (1.0 - bet)

    # projection: screen mean, screen covariance, and depth back to (mu, q, s)
    tcam = proj.tcam[idx]
    tx, ty, tz = tcam[:, 0], tcam[:, 1], tcam[:, 2]
    fx, fy = cam.fx, cam.fy
    jx = fx / tz
    jy = fy / tz
    jxz = -fx * tx / tz**2
    jyz = -fy * ty / tz**2
    s = idx.size
    jmat = np.zeros((s, 2, 3))
    jmat[:, 0, 0] = jx
    jmat[:, 0, 2] = jxz
    jmat[:, 1, 1] = jy
    jmat[:, 1, 2] = jyz

    # half the off-diagonal: dcov_b is the gradient w.r.t. the single scalar b,
    # which the symmetric-matrix chain below would otherwise count twice
    dp = np.empty((s, 2, 2))
    dp[:, 0, 0] = acc["dcov_a"]
    dp[:, 0, 1] = 0.5 * acc["dcov_b"]
    dp[:, 1, 0] = 0.5 * acc["dcov_b"]
    dp[:, 1, 1] = acc["dcov_c"]

    wmat = cam.rotation
    bmat = wmat[None, :, :] @ proj.amat[idx]
    m3 = bmat @ np.swapaxes(bmat, 1, 2)

    dm3 = np.einsum("sij,sik,skl->sjl", jmat, dp, jmat)
    dsigma = np.einsum("ij,sik,kl->sjl", wmat, dm3, wmat)
    dj = 2.0 * np.einsum("sij,sjk,skl->sil", dp, jmat, m3)

    dt = np.zeros((s, 3))
    dt[:, 0] = acc["du"] * jx + dj[:, 0, 2] * (-fx / tz**2)
    dt[:, 1] = acc["dv"] * jy + dj[:, 1, 2] * (-fy / tz**2)
    dt[:, 2] = (
        acc["du"] * (-fx * tx / tz**2)
        + acc["dv"] * (-fy * ty / tz**2)
        + acc["ddepth"]
        + dj[:, 0, 0] * (-fx / tz**2)
        + dj[:, 1, 1] * (-fy / tz**2)
        + dj[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + dj[:, 1, 2] * (2.0 * fy * ty / tz**3)
    )
    dmu += dt @ wmat

    # covariance factorization: Sigma = A A^T, A = R diag(s)
    amat = proj.amat[idx]
    rot = proj.rot[idx]
    scales = proj.scales[idx]
    da = 2.0 * dsigma @ amat
    drot = da * scales[:, None, :]
    dscale = (da * rot).sum(axis=1)
    grads.log_scales[idx] += dscale * scales

    # rotation matrix back to the (normalized) quaternion, then to the raw one
    qhat = scene.normalized_rotations()[idx]
    qw, qx, qy, qz = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    z_ = np.zeros(s)
    drdq = np.empty((s, 4, 3, 3))
    drdq[:, 0] = 2.0 * np.stack(
        [np.stack([z_, -qz, qy], -1), np.stack([qz, z_, -qx], -1), np.stack([-qy, qx, z_], -1)], 1
    )
    drdq[:, 1] = 2.0 * np.stack(
        [np.stack([z_, qy, qz], -1), np.stack([qy, -2 * qx, -qw], -1), np.stack([qz, qw, -2 * qx], -1)], 1
    )
    drdq[:, 2] = 2.0 * np.stack(
        [np.stack([-2 * qy, qx, qw], -1), np.stack([qx, z_, qz], -1), np.stack([-qw, qz, -2 * qy], -1)], 1
    )
    drdq[:, 3] = 2.0 * np.stack(
        [np.stack([-2 * qz, -qw, qx], -1), np.stack([qw, -2 * qz, qy], -1), np.stack([qx, qy, z_], -1)], 1
    )
    dqhat = np.einsum("sjk,sqjk->sq", drot, drdq)
    qraw_norm = np.linalg.norm(scene.rotations[idx], axis=1)
    dqraw = (dqhat - (dqhat * qhat).sum(axis=1, keepdims=True) * qhat) / qraw_norm[:, None]
    grads.rotations[idx] += dqraw

    grads.positions[idx] += dmu
