"""Synthetic UAV frames: camera trajectories, actor placement and compositing.

Camera locations ``t`` and rotations ``r`` follow Blender: ``r`` are XYZ
Euler angles of the camera-to-world rotation and the camera looks down its
local -Z. Poses handed to the renderer are converted to world-to-camera
OpenCV form.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import (BLENDER_TO_CV, blender_to_world_to_camera, look_at_world_to_camera,
                       rotmat_to_euler_xyz)
from .meshing import Mesh, visible_faces
from .scene_io import CameraIntrinsics, CameraPose

KINDS = ("translational", "yaw", "orbit", "altitude")


@dataclass
class TrajectorySpec:
    kind: str
    frames: int
    base_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise_sigma_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise_sigma_r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # translational
    direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    span: float = 1.0
    # yaw
    yaw_range: tuple[float, float] = (0.0, 2 * np.pi)
    # orbit
    orbit_radius: float = 1.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # altitude
    z_range: tuple[float, float] = (1.0, 2.0)

    def __post_init__(self):
        for k in ("base_t", "base_r", "noise_sigma_t", "noise_sigma_r", "direction", "center"):
            setattr(self, k, np.broadcast_to(np.asarray(getattr(self, k), np.float64), (3,)).copy())
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.frames < 1:
            raise ValueError("a trajectory needs at least one frame")
        if self.kind == "orbit" and self.orbit_radius <= 0:
            raise ValueError("orbit radius must be positive")


def _orbit_euler(location, target) -> np.ndarray:
    R, _ = look_at_world_to_camera(location, target)
    return rotmat_to_euler_xyz(R.T @ BLENDER_TO_CV)


def trajectory_locations(spec: TrajectorySpec, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Blender ``(t, r)`` per frame, noise included; shapes ``(F, 3)``."""
    F = spec.frames
    k = np.arange(F, dtype=np.float64)
    t = np.tile(spec.base_t, (F, 1))
    r = np.tile(spec.base_r, (F, 1))
    if spec.kind == "translational":
        frac = k / (F - 1) if F > 1 else np.zeros(1)
        d = spec.direction / np.linalg.norm(spec.direction)
        t = t + np.outer(frac * spec.span, d)
    elif spec.kind == "yaw":
        lo, hi = spec.yaw_range
        r[:, 2] = spec.base_r[2] + lo + (hi - lo) * k / F
    elif spec.kind == "orbit":
        phi = 2 * np.pi * k / F
        pc = spec.center
        t = np.stack([spec.orbit_radius * np.cos(phi) + pc[0],
                      spec.orbit_radius * np.sin(phi) + pc[1],
                      np.full(F, spec.base_t[2] + pc[2])], axis=1)
        r = np.stack([_orbit_euler(loc, pc) for loc in t])
    elif spec.kind == "altitude":
        z0, z1 = spec.z_range
        t[:, 2] = z0 + (z1 - z0) * (k / (F - 1) if F > 1 else 0.0)
    rng = np.random.default_rng(seed)
    eps_t = rng.normal(0.0, 1.0, (F, 3)) * spec.noise_sigma_t
    eps_r = rng.normal(0.0, 1.0, (F, 3)) * spec.noise_sigma_r
    return t + eps_t, r + eps_r


def gen_trajectory(spec: TrajectorySpec, seed: int = 0, sequence_id: int = 0) -> list[CameraPose]:
    t, r = trajectory_locations(spec, seed)
    poses = []
    for k, (loc, eul) in enumerate(zip(t, r)):
        R, tr = blender_to_world_to_camera(loc, eul)
        poses.append(CameraPose.from_matrix(R, tr, sequence_id=sequence_id, image_path=f"frame_{k:05d}.png",
                                            image_id=k + 1))
    return poses


def poses_to_jsonl(poses: list[CameraPose]) -> str:
    return "".join(json.dumps({"frame": k, "quaternion": [float(v) for v in p.rotation],
                               "translation": [float(v) for v in p.translation]}) + "\n"
                   for k, p in enumerate(poses))


def poses_from_jsonl(text: str, sequence_id: int = 0) -> list[CameraPose]:
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(CameraPose(rec["quaternion"], rec["translation"], sequence_id=sequence_id,
                                  image_path=f"frame_{rec['frame']:05d}.png", image_id=rec["frame"] + 1))
    return out


# --------------------------------------------------------------------------
# actors

@dataclass
class ActorPlacement:
    actor_id: int
    position: np.ndarray
    heading: float
    scale: float = 0.135
    face: int = -1


class PlacementError(RuntimeError):
    pass


def actor_center(placements: list[ActorPlacement]) -> np.ndarray:
    if not placements:
        raise ValueError("actor center of an empty placement list")
    return np.mean([p.position for p in placements], axis=0)


def place_actors(mesh: Mesh, trajectory: list[CameraPose], K: CameraIntrinsics, n_actors: int,
                 min_spacing: float, seed: int = 0, scale: float = 0.135,
                 faces: np.ndarray | None = None) -> list[ActorPlacement]:
    """Scatter actors uniformly by area over the faces visible along the whole trajectory."""
    if faces is None:
        faces = visible_faces(mesh, trajectory, K)
    areas = mesh.face_areas[faces] if len(faces) else np.zeros(0)
    total = areas.sum()
    if total <= 0:
        raise PlacementError("no visible surface area to place actors on")
    rng = np.random.default_rng(seed)
    p = areas / total
    tri = mesh.vertices[mesh.faces[faces]]
    placed: list[ActorPlacement] = []
    attempts = 0
    while len(placed) < n_actors:
        if attempts >= 1000 * n_actors:
            raise PlacementError(f"placed {len(placed)} of {n_actors} actors with spacing {min_spacing}")
        attempts += 1
        f = rng.choice(len(faces), p=p)
        r1, r2 = rng.random(2)
        s = np.sqrt(r1)
        a, b, c = tri[f]
        pos = (1 - s) * a + s * (1 - r2) * b + s * r2 * c
        if any(np.linalg.norm(pos - q.position) < min_spacing for q in placed):
            continue
        placed.append(ActorPlacement(len(placed), pos, float(rng.uniform(0, 2 * np.pi)), scale, int(faces[f])))
    return placed


def ground_mesh(size: float = 20.0, cells: int = 20, z: float = 0.0) -> Mesh:
    """Flat square grid of upward-facing triangles centered on the origin."""
    g = np.linspace(-size / 2, size / 2, cells + 1)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], 1)
    idx = np.arange((cells + 1) ** 2).reshape(cells + 1, cells + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(verts, faces.astype(np.int64))


def okutama_preset(seed: int = 0, size: int = 128):
    """Drone-over-field setup: ground mesh, orbit trajectory, intrinsics and an actor count in [10, 15]."""
    rng = np.random.default_rng(seed)
    mesh = ground_mesh()
    spec = TrajectorySpec("orbit", 12, base_t=[0.0, 0.0, 12.0], orbit_radius=6.0)
    K = CameraIntrinsics(0.8 * size, 0.8 * size, (size - 1) / 2, (size - 1) / 2, size, size)
    return mesh, gen_trajectory(spec, seed), K, int(rng.integers(10, 16))


def render_billboards(placements: list[ActorPlacement], pose: CameraPose, K: CameraIntrinsics,
                      up=(0.0, 0.0, 1.0), aspect: float = 0.4, class_id: int = 0):
    """Stand-in foreground: flat textured cards standing at each actor.

    Returns an RGBA layer and ``(class_id, x0, y0, x1, y1)`` pixel boxes,
    drawn far to near so nearer actors cover farther ones.
    """
    H, W = K.height, K.width
    rgba = np.zeros((H, W, 4))
    boxes = []
    up = np.asarray(up, np.float64)
    order = sorted(placements, key=lambda p: -pose.world_to_camera(p.position[None])[0, 2])
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    for p in order:
        foot = pose.world_to_camera(p.position[None])[0]
        head = pose.world_to_camera((p.position + up * p.scale)[None])[0]
        if foot[2] <= 1e-6 or head[2] <= 1e-6:
            continue
        u0, v0 = K.fx * foot[0] / foot[2] + K.cx, K.fy * foot[1] / foot[2] + K.cy
        u1, v1 = K.fx * head[0] / head[2] + K.cx, K.fy * head[1] / head[2] + K.cy
        height_px = max(np.hypot(u1 - u0, v1 - v0), 1.0)
        half_w = 0.5 * aspect * height_px
        x0, x1 = min(u0, u1) - half_w, max(u0, u1) + half_w
        y0, y1 = min(v0, v1), max(v0, v1)
        if y1 - y0 < 1.0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        inside = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        if not inside.any():
            continue
        # shirt/trouser split with a heading-dependent hue
        hue = 0.5 + 0.5 * np.array([np.cos(p.heading), np.cos(p.heading + 2.1), np.cos(p.heading + 4.2)])
        top = (ys - y0) < 0.5 * (y1 - y0)
        color = np.where(top[..., None], hue, 0.25 * hue)
        rgba[inside, :3] = color[inside]
        rgba[inside, 3] = 1.0
        bx0, by0 = max(x0, 0.0), max(y0, 0.0)
        bx1, by1 = min(x1, W - 1.0), min(y1, H - 1.0)
        boxes.append((class_id, bx0, by0, bx1, by1))
    return rgba, boxes


# --------------------------------------------------------------------------
# compositing

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian with radius ceil(3 sigma); ``[1]`` for sigma 0."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(np.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    if len(k) == 1:
        return np.array(img, np.float64)
    out = correlate1d(np.asarray(img, np.float64), k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


@dataclass
class CompositeJob:
    fg: np.ndarray
    bg: np.ndarray
    blur_sigma: float = 0.0
    premultiplied: bool = False
    blur_alpha: bool = False
    annotations: list = field(default_factory=list)


def composite(job: CompositeJob) -> np.ndarray:
    """``alpha * G(fg) + (1 - alpha) * bg`` clamped to [0, 1].

    The matte is left unblurred unless ``job.blur_alpha`` is set.
    """
    fg = np.asarray(job.fg, np.float64)
    bg = np.asarray(job.bg, np.float64)
    if fg.shape[:2] != bg.shape[:2]:
        raise ValueError(f"foreground {fg.shape[:2]} and background {bg.shape[:2]} differ")
    alpha = np.clip(fg[..., 3], 0.0, 1.0)
    rgb = fg[..., :3]
    if job.premultiplied:
        rgb = np.where(alpha[..., None] > 0, rgb / np.where(alpha > 0, alpha, 1.0)[..., None], 0.0)
    g = blur(rgb, job.blur_sigma)
    if job.blur_alpha:
        alpha = np.clip(blur(alpha, job.blur_sigma), 0.0, 1.0)
    out = alpha[..., None] * g + (1.0 - alpha[..., None]) * bg
    return np.clip(out, 0.0, 1.0)


def format_annotations(boxes, width: int, height: int) -> str:
    """One ``class cx cy w h`` line per box, normalized by the image size."""
    lines = []
    for cls, x0, y0, x1, y1 in boxes:
        cx, cy = float((x0 + x1) / 2 / width), float((y0 + y1) / 2 / height)
        w, h = float((x1 - x0) / width), float((y1 - y0) / height)
        lines.append(f"{int(cls)} {cx!r} {cy!r} {w!r} {h!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_annotations(text: str, width: int, height: int):
    boxes = []
    for line in text.splitlines():
        if not line.strip():
            continue
        cls, cx, cy, w, h = line.split()
        cx, cy, w, h = float(cx) * width, float(cy) * height, float(w) * width, float(h) * height
        boxes.append((int(cls), cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return boxes


def write_annotations(path: str | Path, boxes, width: int, height: int) -> None:
    Path(path).write_text(format_annotations(boxes, width, height))
