"""Loss stack and image metrics: photometric L1 / D-SSIM, pseudo-depth L1,
bilateral depth smoothness, reflection-map smoothness, PSNR/SSIM."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

DEFAULT_INIT_CUTOFF = 1000

_NEIGHBOR_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


@dataclass
class LossWeights:
    """Loss coefficients and per-term ablation switches."""

    lambda_photo: float = 0.8   # L1 / D-SSIM balance, shared by both photometric terms
    s_trans: float = 10.0       # transmitted-branch supervision strength
    lambda_init: float = 0.01
    lambda_depth: float = 30.0
    lambda_bi: float = 0.001
    lambda_ref: float = 0.001
    gamma: float = 0.1          # bilateral photometric bandwidth
    enable_trans: bool = True   # pseudo-clean supervision of the transmitted branch
    enable_init: bool = True
    enable_depth: bool = True
    enable_bi: bool = True
    enable_ref: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lambda_photo <= 1.0:
            raise ValueError("lambda_photo must lie in [0, 1]")
        for name in ("s_trans", "lambda_init", "lambda_depth", "lambda_bi", "lambda_ref"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class LossBreakdown:
    """Raw per-term values plus the weighted total."""

    total: float = 0.0
    l_rgb: float = 0.0
    l_i: float = 0.0
    l_i_trans: float = 0.0
    l_init: float = 0.0
    l_depth: float = 0.0
    l_bi: float = 0.0
    l_ref: float = 0.0


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_mean(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    return float(np.abs(a - b).mean())


def l1_mean_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """L1 value and its gradient w.r.t. the first argument."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    diff = a - b
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


# -- Gaussian-window SSIM with an exact reflect-padded convolution adjoint -----

def _gaussian_1d(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_W1D = _gaussian_1d()


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Index map implementing edge-excluding reflection of arbitrary depth."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _filter2(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter with reflect padding; img is (H, W) 2-D."""
    h, w = img.shape
    pad = SSIM_WINDOW // 2
    ri = _reflect_indices(h, pad)
    rj = _reflect_indices(w, pad)
    padded = img[np.ix_(ri, rj)]
    tmp = np.zeros((h, w + 2 * pad))
    for k in range(SSIM_WINDOW):
        tmp += _W1D[k] * padded[k:k + h, :]
    out = np.zeros((h, w))
    for k in range(SSIM_WINDOW):
        out += _W1D[k] * tmp[:, k:k + w]
    return out


def _filter2_adjoint(gout: np.ndarray) -> np.ndarray:
    """Exact adjoint of _filter2 (transposed slice loops + pad scatter)."""
    h, w = gout.shape
    pad = SSIM_WINDOW // 2
    g_tmp = np.zeros((h, w + 2 * pad))
    for k in range(SSIM_WINDOW):
        g_tmp[:, k:k + w] += _W1D[k] * gout
    g_pad = np.zeros((h + 2 * pad, w + 2 * pad))
    for k in range(SSIM_WINDOW):
        g_pad[k:k + h, :] += _W1D[k] * g_tmp
    ri = _reflect_indices(h, pad)
    rj = _reflect_indices(w, pad)
    g_img = np.zeros((h, w))
    np.add.at(g_img, (ri[:, None], rj[None, :]), g_pad)
    return g_img


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise ValueError("images must be (H, W) or (H, W, C)")


def _ssim_map(a: np.ndarray, b: np.ndarray):
    """Per-pixel SSIM map and the intermediates its gradient needs."""
    mu_a = np.stack([_filter2(a[:, :, c]) for c in range(a.shape[2])], axis=2)
    mu_b = np.stack([_filter2(b[:, :, c]) for c in range(b.shape[2])], axis=2)
    e_aa = np.stack([_filter2((a * a)[:, :, c]) for c in range(a.shape[2])], axis=2)
    e_bb = np.stack([_filter2((b * b)[:, :, c]) for c in range(b.shape[2])], axis=2)
    e_ab = np.stack([_filter2((a * b)[:, :, c]) for c in range(a.shape[2])], axis=2)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num_l = 2 * mu_a * mu_b + SSIM_C1
    num_c = 2 * cov + SSIM_C2
    den_l = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    den_c = var_a + var_b + SSIM_C2
    smap = (num_l * num_c) / (den_l * den_c)
    return smap, (mu_a, mu_b, num_l, num_c, den_l, den_c)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM, Gaussian 11x11 sigma 1.5 window at unit dynamic range."""
    a = _as_channels(a)
    b = _as_channels(b)
    _check_shapes(a, b)
    smap, _ = _ssim_map(a, b)
    return float(smap.mean())


def ssim_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient w.r.t. the first image."""
    a = _as_channels(a)
    b = _as_channels(b)
    _check_shapes(a, b)
    smap, (mu_a, mu_b, num_l, num_c, den_l, den_c) = _ssim_map(a, b)
    gs = np.full_like(smap, 1.0 / smap.size)
    g_num_l = gs * num_c / (den_l * den_c)
    g_num_c = gs * num_l / (den_l * den_c)
    g_den_l = -gs * smap / den_l
    g_den_c = -gs * smap / den_c
    g_mu_a = 2 * mu_b * g_num_l + 2 * mu_a * g_den_l
    g_var_a = g_den_c
    g_cov = 2 * g_num_c
    # var_a = E[a^2] - mu_a^2, cov = E[ab] - mu_a mu_b
    g_mu_a += -2 * mu_a * g_var_a - mu_b * g_cov
    grad = np.zeros_like(a)
    for c in range(a.shape[2]):
        grad[:, :, c] = (
            _filter2_adjoint(g_mu_a[:, :, c])
            + 2 * a[:, :, c] * _filter2_adjoint(g_var_a[:, :, c])
            + b[:, :, c] * _filter2_adjoint(g_cov[:, :, c])
        )
    return float(smap.mean()), grad


def d_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """(1 - SSIM) / 2."""
    return (1.0 - ssim(a, b)) / 2.0


def d_ssim_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    value, grad = ssim_grad(a, b)
    return (1.0 - value) / 2.0, -0.5 * grad


def photometric(a: np.ndarray, b: np.ndarray, lam: float) -> float:
    """lam * L1 + (1 - lam) * D-SSIM."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * l1_mean(a, b) + (1.0 - lam) * d_ssim(a, b)


def photometric_grad(rendered: np.ndarray, target: np.ndarray, lam: float):
    """Photometric value and gradient w.r.t. the rendered image."""
    v1, g1 = l1_mean_grad(rendered, target)
    v2, g2 = d_ssim_grad(rendered, target)
    return lam * v1 + (1.0 - lam) * v2, lam * g1 + (1.0 - lam) * g2


def l_rgb(l_i: float, l_i_trans: float, w: LossWeights) -> float:
    """Combined photometric loss over the fused and transmitted images."""
    out = w.lambda_photo * l_i
    if w.enable_trans:
        out += w.s_trans * (1.0 - w.lambda_photo) * l_i_trans
    return out


def l_init(gt: np.ndarray, trans: np.ndarray, s: float) -> float:
    """Early-iteration anchor of the transmitted image to the ground truth."""
    return s * l1_mean(gt, trans)


def l_init_grad(gt: np.ndarray, trans: np.ndarray, s: float):
    v, g = l1_mean_grad(trans, gt)
    return s * v, s * g


def l_depth(pseudo: np.ndarray, rendered: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean absolute depth difference over valid pixels.

    Inputs are expected already normalized per the caller's policy
    (see normalize_depth); an empty valid set yields 0 with a warning.
    """
    pseudo = np.asarray(pseudo, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    _check_shapes(pseudo, rendered)
    valid = np.asarray(valid_mask, dtype=bool)
    _check_shapes(pseudo, valid)
    n_valid = int(valid.sum())
    if n_valid == 0:
        log.warning("depth loss skipped: no covered pixels")
        return 0.0
    return float(np.abs(rendered - pseudo)[valid].sum() / n_valid)


def normalize_depth(depth: np.ndarray, valid: np.ndarray, mode: str = "minmax",
                    reference: np.ndarray | None = None) -> np.ndarray:
    """Depth normalization policy applied before the depth L1.

    minmax: rescale to [0, 1] over the valid set (constant maps become 0).
    lstsq: least-squares scale/shift alignment onto `reference` over the
    valid set (used to align relative pseudo-depth for evaluation).
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if mode == "minmax":
        if not valid.any():
            return np.zeros_like(depth)
        vals = depth[valid]
        rng = vals.max() - vals.min()
        if rng < 1e-12:
            return np.zeros_like(depth)
        return (depth - vals.min()) / rng
    if mode == "lstsq":
        if reference is None:
            raise ValueError("lstsq alignment needs a reference depth map")
        if not valid.any():
            return np.zeros_like(depth)
        p = depth[valid]
        r = np.asarray(reference, dtype=np.float64)[valid]
        a = np.column_stack([p, np.ones_like(p)])
        (s, t), *_ = np.linalg.lstsq(a, r, rcond=None)
        return s * depth + t
    raise ValueError(f"unknown depth alignment mode {mode!r}")


def normalized_depth_loss_grad(pseudo: np.ndarray, rendered: np.ndarray,
                               valid_mask: np.ndarray):
    """Depth L1 after min-max normalizing both maps, with the gradient
    w.r.t. the raw rendered depth (normalization included in the chain).

    Returns (value, grad, info).
    """
    pseudo = np.asarray(pseudo, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    _check_shapes(pseudo, rendered)
    valid = np.asarray(valid_mask, dtype=bool)
    info = {"empty": False, "degenerate": False}
    n_valid = int(valid.sum())
    if n_valid == 0:
        info["empty"] = True
        log.warning("depth loss skipped: no covered pixels")
        return 0.0, np.zeros_like(rendered), info

    pn = normalize_depth(pseudo, valid)
    vals = rendered[valid]
    mn = vals.min()
    mx = vals.max()
    rng = mx - mn
    if rng < 1e-12:
        info["degenerate"] = True
        rn = np.zeros_like(rendered)
        value = float(np.abs(rn - pn)[valid].sum() / n_valid)
        return value, np.zeros_like(rendered), info
    rn = (rendered - mn) / rng

    diff = np.where(valid, rn - pn, 0.0)
    value = float(np.abs(diff).sum() / n_valid)
    u = np.where(valid, np.sign(diff), 0.0) / n_valid
    grad = u / rng
    # the valid min/max pixels move every normalized value with them
    i_min = np.unravel_index(np.argmin(np.where(valid, rendered, np.inf)), rendered.shape)
    i_max = np.unravel_index(np.argmax(np.where(valid, rendered, -np.inf)), rendered.shape)
    grad[i_min] += float((u * (rn - 1.0)).sum() / rng)
    grad[i_max] += float((u * (-rn)).sum() / rng)
    return value, grad, info


def bilateral_weight(ci: np.ndarray, cj: np.ndarray, gamma: float) -> float:
    """Photometric similarity exp(-||ci - cj||_1 / gamma)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    ci = np.asarray(ci, dtype=np.float64)
    cj = np.asarray(cj, dtype=np.float64)
    return float(np.exp(-np.abs(ci - cj).sum() / gamma))


def _offset_slices(di: int, dj: int, h: int, w: int):
    """Slices selecting in-bounds (center, neighbor) pixel pairs."""
    ci = slice(max(0, -di), h - max(0, di))
    cj = slice(max(0, -dj), w - max(0, dj))
    ni = slice(max(0, di), h + min(0, di))
    nj = slice(max(0, dj), w + min(0, dj))
    return (ci, cj), (ni, nj)


def l_bi(depth: np.ndarray, trans_image: np.ndarray, gamma: float) -> float:
    value, _, _ = l_bi_grad(depth, trans_image, gamma, want_grad=False)
    return value


def l_bi_grad(depth: np.ndarray, trans_image: np.ndarray, gamma: float,
              want_grad: bool = True):
    """Bilateral depth smoothness over the 8-neighborhood, normalized by
    pixel count; border pixels use their in-bounds neighbors only.

    Returns (value, grad_depth, grad_image).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    depth = np.asarray(depth, dtype=np.float64)
    img = _as_channels(trans_image)
    if img.shape[:2] != depth.shape:
        raise ValueError("depth and image spatial shapes differ")
    h, w = depth.shape
    npix = h * w
    value = 0.0
    g_depth = np.zeros_like(depth) if want_grad else None
    g_img = np.zeros_like(img) if want_grad else None
    for di, dj in _NEIGHBOR_OFFSETS:
        (ci, cj), (ni, nj) = _offset_slices(di, dj, h, w)
        d_diff = depth[ci, cj] - depth[ni, nj]
        c_diff = img[ci, cj, :] - img[ni, nj, :]
        wgt = np.exp(-np.abs(c_diff).sum(axis=2) / gamma)
        value += float((wgt * np.abs(d_diff)).sum())
        if want_grad:
            s = np.sign(d_diff) * wgt / npix
            g_depth[ci, cj] += s
            g_depth[ni, nj] -= s
            gi = (-wgt * np.abs(d_diff) / gamma / npix)[:, :, None] * np.sign(c_diff)
            g_img[ci, cj, :] += gi
            g_img[ni, nj, :] -= gi
    value /= npix
    if not want_grad:
        return value, None, None
    if np.asarray(trans_image).ndim == 2:
        g_img = g_img[:, :, 0]
    return value, g_depth, g_img


def l_ref_smooth(ref_map: np.ndarray) -> float:
    value, _ = l_ref_smooth_grad(ref_map, want_grad=False)
    return value


def l_ref_smooth_grad(ref_map: np.ndarray, want_grad: bool = True):
    """Unweighted 8-neighborhood smoothness of the reflection map."""
    m = np.asarray(ref_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("reflection map must be (H, W)")
    h, w = m.shape
    npix = h * w
    value = 0.0
    grad = np.zeros_like(m) if want_grad else None
    for di, dj in _NEIGHBOR_OFFSETS:
        (ci, cj), (ni, nj) = _offset_slices(di, dj, h, w)
        diff = m[ci, cj] - m[ni, nj]
        value += float(np.abs(diff).sum())
        if want_grad:
            s = np.sign(diff) / npix
            grad[ci, cj] += s
            grad[ni, nj] -= s
    return value / npix, grad


@dataclass
class LossParts:
    """Raw per-term values fed to the overall combination."""

    l_i: float = 0.0
    l_i_trans: float = 0.0
    l_init: float = 0.0
    l_depth: float = 0.0
    l_bi: float = 0.0
    l_ref: float = 0.0


def total_loss(parts: LossParts, w: LossWeights, iteration: int,
               init_cutoff: int = DEFAULT_INIT_CUTOFF) -> LossBreakdown:
    """Weighted overall loss; disabled or scheduled-out terms contribute 0."""
    rgb = l_rgb(parts.l_i, parts.l_i_trans, w)
    total = rgb
    if w.enable_init and iteration < init_cutoff:
        total += w.lambda_init * parts.l_init
    if w.enable_depth:
        total += w.lambda_depth * parts.l_depth
    if w.enable_bi:
        total += w.lambda_bi * parts.l_bi
    if w.enable_ref:
        total += w.lambda_ref * parts.l_ref
    return LossBreakdown(
        total=total, l_rgb=rgb, l_i=parts.l_i, l_i_trans=parts.l_i_trans,
        l_init=parts.l_init, l_depth=parts.l_depth, l_bi=parts.l_bi,
        l_ref=parts.l_ref,
    )


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB at unit range; +inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM, reported so that ssim_metric = 1 - 2 * d_ssim exactly."""
    return 1.0 - 2.0 * d_ssim(a, b)
