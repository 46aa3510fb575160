"""Small scenes built from known splats, for tests and desk-scale experiments.

Everything here is deterministic given the seed. Images are rendered with
the package's own rasterizer, so a model with the right parameters can
reproduce them exactly.
"""
from __future__ import annotations

import numpy as np

from .geometry import look_at_world_to_camera
from .rasterizer import render
from .scene_io import CameraIntrinsics, CameraPose, Frame, MaskSet, MultiSequenceDataset
from .splats import Splats

TINT_ALPHA = np.array([1.2, 0.9, 1.0])
TINT_BETA = np.array([0.05, 0.0, -0.05])


def default_intrinsics(size: int = 64, fov_scale: float = 1.1) -> CameraIntrinsics:
    f = fov_scale * size
    return CameraIntrinsics(f, f, (size - 1) / 2.0, (size - 1) / 2.0, size, size)


def ground_truth_splats(n: int = 200, seed: int = 0, extent: float = 1.7, block_height: float = 0.35) -> Splats:
    """Flat splats tiling a ground plane, with a raised square block in the middle.

    About a fifth of the splats cover the block top; the rest cover the
    ground on a jittered grid. Colors vary smoothly with position plus a
    per-splat jitter, so images have texture at several scales.
    """
    rng = np.random.default_rng(seed)
    n_top = n // 5
    n_ground = n - n_top
    side = int(np.ceil(np.sqrt(n_ground)))
    g = (np.arange(side) + 0.5) / side * 2 * extent - extent
    gx, gy = np.meshgrid(g, g)
    ground = np.stack([gx.ravel(), gy.ravel(), np.zeros(side * side)], 1)[:n_ground]
    step = 2 * extent / side
    ground[:, :2] += rng.uniform(-0.25, 0.25, (n_ground, 2)) * step

    half = 0.35
    tside = int(np.ceil(np.sqrt(n_top)))
    t = (np.arange(tside) + 0.5) / tside * 2 * half - half
    tx, ty = np.meshgrid(t, t)
    top = np.stack([tx.ravel(), ty.ravel(), np.full(tside * tside, block_height)], 1)[:n_top]

    mu = np.concatenate([ground, top])
    s_ground = 0.75 * step
    s_top = 0.75 * (2 * half / tside)
    scale = np.empty((n, 3))
    scale[:n_ground] = [s_ground, s_ground, 1e-3]
    scale[n_ground:] = [s_top, s_top, 1e-3]
    scale[:, :2] *= rng.uniform(0.85, 1.15, (n, 2))
    yaw = rng.uniform(0, np.pi, n)
    rot = np.stack([np.cos(yaw / 2), np.zeros(n), np.zeros(n), np.sin(yaw / 2)], 1)
    opacity = rng.uniform(0.85, 0.98, n)
    x, y = mu[:, 0], mu[:, 1]
    base = np.stack([0.45 + 0.25 * np.sin(2.1 * x + 0.3),
                     0.45 + 0.25 * np.cos(1.7 * y - 0.4),
                     0.40 + 0.20 * np.sin(1.3 * (x + y))], 1)
    base[n_ground:] = [0.75, 0.35, 0.25]
    color = np.clip(base + rng.uniform(-0.15, 0.15, (n, 3)), 0.05, 0.95)
    return Splats.create(mu, scale, rot, opacity, color)


def orbit_cameras(count: int, radius: float = 0.6, height: float = 2.6, phase: float = 0.0,
                  target_jitter: float = 0.15, seed: int = 0, sequence_id: int = 0) -> list[CameraPose]:
    """Slightly oblique downward views on a circle above the origin."""
    rng = np.random.default_rng(seed)
    poses = []
    for k in range(count):
        phi = phase + 2 * np.pi * k / count
        eye = np.array([radius * np.cos(phi), radius * np.sin(phi), height])
        target = np.concatenate([rng.uniform(-target_jitter, target_jitter, 2), [0.0]])
        R, t = look_at_world_to_camera(eye, target, up=(0.0, 1.0, 0.0))
        poses.append(CameraPose.from_matrix(R, t, sequence_id=sequence_id, image_id=len(poses) + 1,
                                            image_path=f"s{sequence_id}_{k:03d}.png"))
    return poses


def tinted_colors(colors: np.ndarray, sequence_id: int) -> np.ndarray:
    """Sequence 1 carries a fixed affine tint; other sequences render plain."""
    if sequence_id == 1:
        return colors * TINT_ALPHA + TINT_BETA
    return colors


def render_frame(gt: Splats, pose: CameraPose, K: CameraIntrinsics, tint: bool = True) -> np.ndarray:
    colors = tinted_colors(gt.base_color, pose.sequence_id) if tint else gt.base_color
    return render(gt, colors, pose, K).color


def init_points(gt: Splats, noise: float = 0.02, seed: int = 0):
    """Sparse points standing in for a structure-from-motion cloud: GT means plus noise."""
    rng = np.random.default_rng(seed)
    pts = gt.mu + rng.normal(0.0, noise, gt.mu.shape)
    return pts, gt.base_color.copy()


def make_dataset(gt: Splats, num_sequences: int = 2, frames_per_sequence: int = 12,
                 holdout_every: int = 6, size: int = 64, tint: bool = True, seed: int = 0,
                 point_noise: float = 0.02) -> MultiSequenceDataset:
    """Multi-sequence dataset over ``gt``; every ``holdout_every``-th frame is held out."""
    K = default_intrinsics(size)
    frames = []
    for s in range(num_sequences):
        poses = orbit_cameras(frames_per_sequence, radius=0.55 + 0.1 * s, phase=0.4 * s,
                              seed=seed * 101 + s, sequence_id=s)
        for k, pose in enumerate(poses):
            img = render_frame(gt, pose, K, tint)
            hold = holdout_every > 0 and k % holdout_every == holdout_every - 1
            frames.append(Frame(pose, img, MaskSet.empty(size, size), holdout=hold))
    pts, cols = init_points(gt, point_noise, seed)
    return MultiSequenceDataset({1: K}, frames, pts, cols, num_sequences)


def block_entities(shape, block: int = 8) -> np.ndarray:
    """Entity map of square cells, labels from 1."""
    H, W = shape
    ys, xs = np.mgrid[0:H, 0:W]
    cols = (W + block - 1) // block
    return (ys // block) * cols + xs // block + 1


def _project(f: Frame, K: CameraIntrinsics, point: np.ndarray) -> np.ndarray:
    c = f.pose.world_to_camera(point[None])[0]
    return np.array([K.fx * c[0] / c[2] + K.cx, K.fy * c[1] / c[2] + K.cy, c[2]])


def add_transients(dataset: MultiSequenceDataset, fraction: float = 0.3, size: int = 6,
                   masked_share: float = 0.5, seed: int = 0, color=(1.0, 1.0, 1.0),
                   anchor=(0.6, -1.15, 0.0), drift=(0.01, -0.01, 0.0)):
    """Paint a slowly moving square sprite, like a person lingering at one spot.

    The sprite stands at a world point on the ground that drifts by ``drift``
    per occurrence. It appears in the first ``fraction`` of all frames (in
    dataset order) whose view contains the point, and is gone by the time
    the remaining views of the spot are captured. It covers ``size`` x
    ``size`` pixels around the point's projection. Only ``masked_share`` of
    its occurrences get a correct segmenter mask; the rest get a mask
    covering just its top row, as a segmenter that misses most of the object
    would give. Entity maps are a grid of cells with the sprite as its own
    entity. Held-out frames with the sprite get an evaluation mask covering
    it. Returns the list of affected frame indices.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset.frames)
    count = int(round(fraction * n))
    anchor = np.asarray(anchor, np.float64)
    drift = np.asarray(drift, np.float64)
    half = size / 2
    sees = []
    for i, f in enumerate(dataset.frames):
        H, W = f.image.shape[:2]
        u, v, z = _project(f, dataset.intrinsics(f), anchor)
        if z > 0 and half <= u <= W - 1 - half and half <= v <= H - 1 - half:
            sees.append(i)
    hit = np.array(sees[:count], dtype=np.int64)
    n_masked = int(round(masked_share * len(hit)))
    masked = set(rng.choice(hit, n_masked, replace=False).tolist()) if len(hit) else set()
    for j, idx in enumerate(hit):
        f = dataset.frames[idx]
        H, W = f.image.shape[:2]
        u, v, _ = _project(f, dataset.intrinsics(f), anchor + j * drift)
        x0 = int(np.clip(round(u - size / 2), 0, W - size))
        y0 = int(np.clip(round(v - size / 2), 0, H - size))
        sprite = np.zeros((H, W), bool)
        sprite[y0:y0 + size, x0:x0 + size] = True
        img = f.image.copy()
        img[sprite] = color
        ent = block_entities((H, W))
        ent[sprite] = ent.max() + 1
        sam = np.zeros((H, W), np.uint8)
        if idx in masked:
            sam[sprite] = 1
        else:
            sam[y0:y0 + 1, x0:x0 + size] = 1
        f.image = img
        f.masks = MaskSet(sam, ent.astype(np.int32))
        if f.holdout:
            f.eval_mask = sprite.astype(np.uint8)
    for f in dataset.frames:
        if not f.masks.entity.any():
            f.masks = MaskSet(f.masks.sam, block_entities(f.image.shape[:2]).astype(np.int32))
    return hit.tolist()
