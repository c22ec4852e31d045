"""Dataset ingestion, checkpoint persistence, and the synthetic-scene generator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .gaussians import Camera, GaussianSet, logit
from .rasterizer import render_forward
from .sh import MAX_SH_DEGREE, SH_DC, num_sh_coeffs

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DatasetError(ValueError):
    """A dataset file is missing, undecodable, or inconsistent."""


class PfmError(ValueError):
    """Malformed portable float map."""


class CheckpointError(ValueError):
    """Checkpoint schema or version mismatch."""


@dataclass
class TrainView:
    name: str
    camera: Camera
    image: np.ndarray                 # (H, W, 3) in [0, 1]
    image_path: Path
    pseudo_clean: np.ndarray | None = None
    pseudo_depth: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class TrainDataset:
    root: Path
    views: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    background: np.ndarray


def _decode_image(path: Path, frame: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise DatasetError(f"frame {frame!r}: cannot decode image {path}: {e}") from e
    return arr


def _camera_from_c2w_gl(c2w: np.ndarray, width: int, height: int,
                        fx: float, fy: float, cx: float, cy: float) -> Camera:
    """OpenGL-style camera-to-world (x right, y up, z backward) to the internal
    x-right / y-down / z-forward world-to-camera convention."""
    c2w = np.asarray(c2w, dtype=np.float64)
    flipped = c2w[:3, :3].copy()
    flipped[:, 1] *= -1.0
    flipped[:, 2] *= -1.0
    r_w2c = flipped.T
    t_w2c = -r_w2c @ c2w[:3, 3]
    return Camera(width, height, fx, fy, cx, cy, r_w2c, t_w2c)


def load_dataset(root) -> TrainDataset:
    """Load a transforms-JSON dataset with optional clean/, depth/, mask/ dirs."""
    root = Path(root)
    tpath = root / "transforms.json"
    if not tpath.is_file():
        raise DatasetError(f"missing transforms file: {tpath}")
    with open(tpath, "r", encoding="utf-8") as f:
        meta = json.load(f)
    frames = meta.get("frames", [])
    if not frames:
        raise DatasetError("transforms.json lists no frames")
    frames = sorted(frames, key=lambda fr: fr["file_path"])

    views = []
    for fr in frames:
        rel = fr["file_path"]
        stem = Path(rel).stem
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.is_file():
            raise DatasetError(f"frame {stem!r}: missing image {img_path}")
        image = _decode_image(img_path, stem)
        h, w = image.shape[:2]

        if "camera_angle_x" in meta:
            fx_default = w / (2.0 * math.tan(meta["camera_angle_x"] / 2.0))
        else:
            fx_default = None
        fx = fr.get("fl_x", fx_default)
        fy = fr.get("fl_y", fx)
        if fx is None:
            raise DatasetError(f"frame {stem!r}: no camera_angle_x and no fl_x")
        cx = fr.get("cx", w / 2.0)
        cy = fr.get("cy", h / 2.0)
        if "w" in fr and int(fr["w"]) != w or "h" in fr and int(fr["h"]) != h:
            raise DatasetError(f"frame {stem!r}: declared resolution differs from image")
        cam = _camera_from_c2w_gl(np.array(fr["transform_matrix"]), w, h, fx, fy, cx, cy)

        clean = None
        cpath = root / "clean" / f"{stem}.png"
        if cpath.is_file():
            clean = _decode_image(cpath, stem)
            if clean.shape != image.shape:
                raise DatasetError(f"frame {stem!r}: pseudo-clean resolution differs")
        depth = None
        dpath = root / "depth" / f"{stem}.pfm"
        if dpath.is_file():
            depth = read_pfm(dpath)
            if depth.shape != (h, w):
                raise DatasetError(f"frame {stem!r}: pseudo-depth resolution differs")
        mask = None
        mpath = root / "mask" / f"{stem}.png"
        if mpath.is_file():
            mask = load_mask(mpath, (w, h))

        views.append(TrainView(stem, cam, image, img_path, clean, depth, mask))

    if "scene_bounds" in meta:
        bmin = np.array(meta["scene_bounds"][0], dtype=np.float64)
        bmax = np.array(meta["scene_bounds"][1], dtype=np.float64)
    else:
        centers = np.stack([v.camera.center for v in views])
        mid = centers.mean(axis=0)
        radius = float(np.linalg.norm(centers - mid, axis=1).mean())
        half = 0.4 * radius if radius > 0 else 1.0
        bmin, bmax = mid - half, mid + half
    background = np.array(meta.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)
    return TrainDataset(root, views, bmin, bmax, background)


# -- Portable float map (grayscale, 32-bit) ------------------------------------

def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a top-down float array."""
    with open(path, "rb") as f:
        data = f.read()
    offset = 0

    def next_line():
        nonlocal offset
        end = data.find(b"\n", offset)
        if end < 0:
            raise PfmError(f"{path}: truncated header at byte {offset}")
        line = data[offset:end]
        offset = end + 1
        return line

    magic = next_line().strip()
    if magic == b"PF":
        raise PfmError(f"{path}: color PFM is unsupported (byte 0)")
    if magic != b"Pf":
        raise PfmError(f"{path}: bad magic {magic!r} (byte 0)")
    dims_at = offset
    dims = next_line().split()
    if len(dims) != 2:
        raise PfmError(f"{path}: malformed dimensions line (byte {dims_at})")
    width, height = int(dims[0]), int(dims[1])
    if width <= 0 or height <= 0:
        raise PfmError(f"{path}: nonpositive dimensions (byte {dims_at})")
    scale_at = offset
    try:
        scale = float(next_line())
    except ValueError as e:
        raise PfmError(f"{path}: malformed scale line (byte {scale_at})") from e
    endian = "<" if scale < 0 else ">"
    count = width * height
    payload = data[offset:offset + 4 * count]
    if len(payload) < 4 * count:
        raise PfmError(
            f"{path}: payload has {len(payload)} bytes, needs {4 * count} (byte {offset})"
        )
    arr = np.frombuffer(payload, dtype=endian + "f4", count=count)
    arr = arr.reshape(height, width)[::-1, :]  # stored bottom-to-top
    return arr.astype(np.float64)


def write_pfm(path, depth: np.ndarray) -> None:
    """Write a top-down float array as a little-endian grayscale PFM."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise PfmError("depth image must be 2-D")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(depth[::-1, :].astype("<f4").tobytes())


def load_mask(path, size_wh) -> np.ndarray:
    """8-bit grayscale mask as [0, 1] weights, nearest-resampled if needed."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if (im.width, im.height) != tuple(size_wh):
                log.warning(
                    "mask %s is %dx%d, resampling to %dx%d",
                    path, im.width, im.height, size_wh[0], size_wh[1],
                )
                im = im.resize(tuple(size_wh), Image.NEAREST)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as e:
        raise DatasetError(f"cannot decode mask {path}: {e}") from e
    return arr


# -- Checkpoints (binary little-endian PLY, double precision) ------------------

def _property_names(degree_max: int) -> list[str]:
    k = num_sh_coeffs(degree_max)
    names = [
        "pos_x", "pos_y", "pos_z",
        "rot_w", "rot_x", "rot_y", "rot_z",
        "log_scale_x", "log_scale_y", "log_scale_z",
        "raw_alpha_trans", "raw_alpha_ref", "raw_beta_ref",
    ]
    names += [f"sh_trans_{i}" for i in range(3 * k)]
    names += [f"sh_ref_{i}" for i in range(3 * k)]
    return names


def save_checkpoint(path, scene: GaussianSet, iteration: int = 0) -> None:
    """Write the scene as a binary point-cloud container (PLY, doubles)."""
    n = len(scene)
    k = num_sh_coeffs(scene.degree_max)
    names = _property_names(scene.degree_max)
    cols = np.concatenate(
        [
            scene.positions,
            scene.rotations,
            scene.log_scales,
            scene.raw_alpha_trans[:, None],
            scene.raw_alpha_ref[:, None],
            scene.raw_beta_ref[:, None],
            scene.sh_trans.reshape(n, 3 * k),
            scene.sh_ref.reshape(n, 3 * k),
        ],
        axis=1,
    )
    header = ["ply", "format binary_little_endian 1.0",
              f"comment refsplat_checkpoint_version {CHECKPOINT_VERSION}",
              f"comment degree_max {scene.degree_max}",
              f"comment iteration {iteration}",
              f"element vertex {n}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        f.write(cols.astype("<f8").tobytes())


def load_checkpoint(path, degree_max: int | None = None):
    """Load a checkpoint; returns (GaussianSet, metadata dict).

    A lower-degree checkpoint is zero-padded up to `degree_max` when given.
    """
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint container")
    header_lines = data[:end].decode("ascii", "replace").splitlines()
    payload = data[end + len(b"end_header\n"):]

    meta = {"iteration": 0}
    props = []
    n = None
    for line in header_lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise CheckpointError(f"{path}: unsupported format {parts[1]}")
        elif parts[0] == "comment" and len(parts) == 3:
            if parts[1] == "refsplat_checkpoint_version":
                meta["version"] = int(parts[2])
            elif parts[1] == "degree_max":
                meta["degree_max"] = int(parts[2])
            elif parts[1] == "iteration":
                meta["iteration"] = int(parts[2])
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "double":
                raise CheckpointError(f"{path}: property {parts[2]} is not double")
            props.append(parts[2])
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
        )
    if "degree_max" not in meta or n is None:
        raise CheckpointError(f"{path}: header lacks degree_max or vertex count")
    file_degree = meta["degree_max"]
    expected = _property_names(file_degree)
    missing = [p for p in expected if p not in props]
    if missing:
        raise CheckpointError(f"{path}: missing properties: {', '.join(missing)}")
    if props != expected:
        raise CheckpointError(f"{path}: property order differs from the schema")

    ncols = len(expected)
    need = 8 * n * ncols
    if len(payload) < need:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, needs {need}")
    cols = np.frombuffer(payload[:need], dtype="<f8").reshape(n, ncols).astype(np.float64)
    k = num_sh_coeffs(file_degree)
    i = 0

    def take(m):
        nonlocal i
        out = cols[:, i:i + m]
        i += m
        return out

    positions = take(3)
    rotations = take(4)
    log_scales = take(3)
    raw_at = take(1)[:, 0]
    raw_ar = take(1)[:, 0]
    raw_br = take(1)[:, 0]
    sh_trans = take(3 * k).reshape(n, 3, k)
    sh_ref = take(3 * k).reshape(n, 3, k)

    if degree_max is not None and degree_max > file_degree:
        k_new = num_sh_coeffs(degree_max)
        padded_t = np.zeros((n, 3, k_new))
        padded_r = np.zeros((n, 3, k_new))
        padded_t[:, :, :k] = sh_trans
        padded_r[:, :, :k] = sh_ref
        sh_trans, sh_ref = padded_t, padded_r
    elif degree_max is not None and degree_max < file_degree:
        raise CheckpointError(
            f"{path}: stores degree {file_degree}, cannot load into degree {degree_max}"
        )

    scene = GaussianSet(positions, rotations, log_scales, sh_trans, sh_ref,
                        raw_at, raw_ar, raw_br)
    return scene, meta


# -- Synthetic scene generator --------------------------------------------------

def quantize_image(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_png(path, arr_uint8: np.ndarray) -> None:
    Image.fromarray(arr_uint8).save(path)


@dataclass
class SyntheticSpec:
    n_gaussians: int = 50
    n_views: int = 5
    resolution: tuple = (64, 64)
    reflective_fraction: float = 0.3
    camera_radius: float = 2.8
    camera_angle_x: float = 0.9
    camera_height: float = 0.45

    def __post_init__(self):
        if self.n_gaussians < 1 or self.n_views < 1:
            raise ValueError("spec must be positive")


def _lookat_c2w_gl(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = eye
    return c2w


def ground_truth_scene(spec: SyntheticSpec, seed: int) -> GaussianSet:
    """Seeded Gaussians inside the unit cube with a reflective subset."""
    rng = np.random.default_rng(seed)
    n = spec.n_gaussians
    k = num_sh_coeffs(MAX_SH_DEGREE)

    positions = rng.uniform(-0.5, 0.5, (n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = rng.uniform(math.log(0.06), math.log(0.16), (n, 3))

    sh_trans = np.zeros((n, 3, k))
    sh_trans[:, :, 0] = (rng.uniform(0.2, 0.8, (n, 3)) - 0.5) / SH_DC
    sh_trans[:, :, 1:4] = rng.uniform(-0.04, 0.04, (n, 3, 3))
    sh_ref = np.zeros((n, 3, k))

    raw_alpha_trans = np.array([logit(p) for p in rng.uniform(0.55, 0.9, n)])
    raw_alpha_ref = np.full(n, logit(0.1))
    raw_beta_ref = np.full(n, -30.0)  # effectively reflection-free

    n_ref = int(round(spec.reflective_fraction * n))
    ref_idx = rng.choice(n, size=n_ref, replace=False)
    if n_ref:
        sh_ref[ref_idx, :, 0] = (rng.uniform(0.4, 0.9, (n_ref, 3)) - 0.5) / SH_DC
        sh_ref[ref_idx, :, 1:4] = rng.uniform(-0.04, 0.04, (n_ref, 3, 3))
        raw_alpha_ref[ref_idx] = [logit(p) for p in rng.uniform(0.6, 0.9, n_ref)]
        raw_beta_ref[ref_idx] = [logit(p) for p in rng.uniform(0.85, 0.95, n_ref)]

    return GaussianSet(positions, rotations, log_scales, sh_trans, sh_ref,
                       raw_alpha_trans, raw_alpha_ref, raw_beta_ref)


def generate_synthetic(out_dir, spec: SyntheticSpec | None = None, seed: int = 0):
    """Materialize a synthetic dataset tree plus its ground-truth checkpoint.

    The fused render becomes the training image, the transmitted image the
    pseudo-clean target, the rendered depth the pseudo-depth PFM, and the
    thresholded reflection map the mask. Returns (TrainDataset, GaussianSet).
    """
    spec = spec or SyntheticSpec()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    (out / "mask").mkdir(exist_ok=True)

    scene = ground_truth_scene(spec, seed)
    w, h = spec.resolution

    frames = []
    for i in range(spec.n_views):
        phi = 2.0 * math.pi * i / spec.n_views
        eye = np.array(
            [spec.camera_radius * math.sin(phi), spec.camera_height,
             spec.camera_radius * math.cos(phi)]
        )
        c2w = _lookat_c2w_gl(eye, np.zeros(3))
        frames.append({
            "file_path": f"images/r_{i:03d}",
            "transform_matrix": c2w.tolist(),
        })
    meta = {
        "camera_angle_x": spec.camera_angle_x,
        "scene_bounds": [[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]],
        "background": [0.0, 0.0, 0.0],
        "frames": frames,
    }
    with open(out / "transforms.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)

    # render through the same loader-built cameras the consumers will use;
    # the images do not exist yet, so build cameras directly here
    fx = w / (2.0 * math.tan(spec.camera_angle_x / 2.0))
    for i, fr in enumerate(frames):
        cam = _camera_from_c2w_gl(
            np.array(fr["transform_matrix"]), w, h, fx, fx, w / 2.0, h / 2.0
        )
        outputs = render_forward(scene, cam, MAX_SH_DEGREE, np.zeros(3))
        stem = f"r_{i:03d}"
        _write_png(out / "images" / f"{stem}.png", quantize_image(outputs.image))
        _write_png(out / "clean" / f"{stem}.png", quantize_image(outputs.image_trans))
        write_pfm(out / "depth" / f"{stem}.pfm", outputs.depth)
        mask = (outputs.ref_map > 0.5).astype(np.uint8) * 255
        _write_png(out / "mask" / f"{stem}.png", mask)

    save_checkpoint(out / "ground_truth.ply", scene)
    return load_dataset(out), scene
