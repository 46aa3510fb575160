"""TSDF fusion of rendered depth maps, surface extraction and visibility queries."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from skimage import measure

from .rasterizer import pixel_rays
from .scene_io import CameraIntrinsics, CameraPose


@dataclass
class TSDFVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    tsdf: np.ndarray
    weight: np.ndarray
    truncation: float

    @classmethod
    def create(cls, origin, voxel_size: float, dims, truncation: float | None = None) -> "TSDFVolume":
        dims = tuple(int(d) for d in dims)
        return cls(np.asarray(origin, np.float64), float(voxel_size), dims,
                   np.ones(dims), np.zeros(dims),
                   4.0 * voxel_size if truncation is None else float(truncation))

    @classmethod
    def from_bounds(cls, lo, hi, max_dim: int = 128, truncation_voxels: float = 4.0) -> "TSDFVolume":
        lo, hi = np.asarray(lo, np.float64), np.asarray(hi, np.float64)
        voxel = float(np.max(hi - lo)) / (max_dim - 1)
        dims = np.minimum(np.ceil((hi - lo) / voxel).astype(int) + 1, max_dim)
        return cls.create(lo, voxel, dims, truncation_voxels * voxel)

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size


def fit_bounds(depths, poses, K: CameraIntrinsics, alphas=None, pad: float = 0.05,
               lo_pct: float = 1.0, hi_pct: float = 99.0):
    """Axis-aligned box around the 1st-99th percentile of unprojected depth samples, padded.

    Each axis is padded by ``pad`` times the largest extent, so a flat scene
    still gets a volume of nonzero thickness.
    """
    rays = pixel_rays(K)
    pts = []
    for k, (depth, pose) in enumerate(zip(depths, poses)):
        ok = depth > 0
        if alphas is not None:
            ok &= alphas[k] >= 0.5
        cam = depth[ok][:, None] * rays[ok]
        pts.append((cam - pose.translation) @ pose.R)
    pts = np.concatenate(pts)
    lo = np.percentile(pts, lo_pct, axis=0)
    hi = np.percentile(pts, hi_pct, axis=0)
    margin = pad * float(np.max(hi - lo))
    return lo - margin, hi + margin


@nb.njit(cache=True)
def _integrate(tsdf, weight, origin, voxel, R, t, fx, fy, cx, cy, depth, valid, trunc):
    nx, ny, nz = tsdf.shape
    H, W = depth.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = origin[0] + i * voxel
                py = origin[1] + j * voxel
                pz = origin[2] + k * voxel
                xc = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
                yc = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
                zc = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
                if zc <= 1e-9:
                    continue
                u = fx * xc / zc + cx
                v = fy * yc / zc + cy
                if u < 0 or v < 0 or u > W - 1 or v > H - 1:
                    continue
                x0 = min(int(u), W - 2)
                y0 = min(int(v), H - 2)
                ax = u - x0
                ay = v - y0
                if valid[y0, x0] and valid[y0, x0 + 1] and valid[y0 + 1, x0] and valid[y0 + 1, x0 + 1]:
                    d = ((1 - ay) * ((1 - ax) * depth[y0, x0] + ax * depth[y0, x0 + 1])
                         + ay * ((1 - ax) * depth[y0 + 1, x0] + ax * depth[y0 + 1, x0 + 1]))
                else:
                    ui = int(u + 0.5)
                    vi = int(v + 0.5)
                    if not valid[vi, ui]:
                        continue
                    d = depth[vi, ui]
                sdf = d - zc
                if sdf < -trunc:
                    continue
                val = sdf / trunc
                if val > 1.0:
                    val = 1.0
                w = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w + val) / (w + 1.0)
                weight[i, j, k] = w + 1.0


def tsdf_integrate(vol: TSDFVolume, depth: np.ndarray, pose: CameraPose, K: CameraIntrinsics,
                   valid: np.ndarray | None = None) -> TSDFVolume:
    """Fuse one depth map in place (also returned). Depth is sampled bilinearly where possible."""
    depth = np.asarray(depth, np.float64)
    if valid is None:
        valid = depth > 0
    _integrate(vol.tsdf, vol.weight, vol.origin, vol.voxel_size, pose.R, pose.translation,
               K.fx, K.fy, K.cx, K.cy, depth, np.asarray(valid, np.bool_), vol.truncation)
    return vol


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    @property
    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        ue = np.unique(self.edges(), axis=0)
        used = np.unique(self.faces)
        return len(used) - len(ue) + len(self.faces)


def clean_mesh(vertices: np.ndarray, faces: np.ndarray) -> Mesh:
    """Merge coincident vertices and drop degenerate faces."""
    if len(faces) == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    key = np.round(vertices, 12)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    f = inv[faces]
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[keep]
    verts = np.zeros((len(uniq), 3))
    np.add.at(verts, inv, vertices)
    verts /= np.bincount(inv, minlength=len(uniq))[:, None]
    m = Mesh(verts, f)
    m.faces = m.faces[m.face_areas > 0]
    used, remap = np.unique(m.faces, return_inverse=True)
    return Mesh(m.vertices[used], remap.reshape(-1, 3).astype(np.int64))


def extract_mesh(vol: TSDFVolume) -> Mesh:
    """Zero level set of the TSDF; cubes touching unobserved voxels produce no faces.

    Faces are wound so that normals point toward positive TSDF (free space).
    """
    observed = vol.weight > 0
    field = vol.tsdf
    if not observed.any() or field[observed].min() > 0 or field[observed].max() < 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    # a cube is processed only when all eight corners were observed; skimage
    # indexes a cube's mask entry by its upper corner
    nx, ny, nz = field.shape
    cube = np.zeros_like(observed)
    cube[1:, 1:, 1:] = True
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cube[1:, 1:, 1:] &= observed[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
    if not cube.any():
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    try:
        verts, faces, _, _ = measure.marching_cubes(field, level=0.0, spacing=(vol.voxel_size,) * 3,
                                                    mask=cube, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    return clean_mesh(verts + vol.origin, faces.astype(np.int64))


def write_obj(path: str | Path, mesh: Mesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3))


@nb.njit(cache=True)
def _zbuffer(uv, z, faces, H, W):
    zbuf = np.full((H, W), np.inf)
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[a] <= 1e-9 or z[b] <= 1e-9 or z[c] <= 1e-9:
            continue
        x0, y0 = uv[a, 0], uv[a, 1]
        x1, y1 = uv[b, 0], uv[b, 1]
        x2, y2 = uv[c, 0], uv[c, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), W - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), H - 1)
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                zi = 1.0 / (w0 / z[a] + w1 / z[b] + w2 / z[c])
                if zi < zbuf[py, px]:
                    zbuf[py, px] = zi
    return zbuf


def depth_buffer(mesh: Mesh, pose: CameraPose, K: CameraIntrinsics) -> np.ndarray:
    """Per-pixel nearest mesh depth (inf where empty)."""
    cam = pose.world_to_camera(mesh.vertices)
    z = cam[:, 2]
    zs = np.where(z > 1e-9, z, 1.0)
    uv = np.stack([K.fx * cam[:, 0] / zs + K.cx, K.fy * cam[:, 1] / zs + K.cy], 1)
    return _zbuffer(uv, z, mesh.faces, K.height, K.width)


def visible_faces(mesh: Mesh, trajectory: list[CameraPose], K: CameraIntrinsics,
                  depth_tol: float = 1e-3) -> np.ndarray:
    """Indices of faces visible from every pose of the trajectory.

    A face counts as visible in one view when its centroid lands in the
    image, the face points toward the camera, and the centroid is no deeper
    than the nearest mesh depth within 1 px of its pixel (relative slack
    ``depth_tol``).
    """
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    cent = mesh.centroids
    normals = mesh.face_normals
    keep = np.ones(len(cent), bool)
    for pose in trajectory:
        zbuf = depth_buffer(mesh, pose, K)
        # 1 px tolerance: compare against the deepest buffer value in the 3x3 neighborhood
        pad = np.pad(np.where(np.isfinite(zbuf), zbuf, -np.inf), 1, constant_values=-np.inf)
        near = np.max(np.stack([pad[dy:dy + K.height, dx:dx + K.width]
                                for dy in range(3) for dx in range(3)]), axis=0)
        cam = pose.world_to_camera(cent)
        z = cam[:, 2]
        zs = np.where(z > 1e-9, z, 1.0)
        u = K.fx * cam[:, 0] / zs + K.cx
        v = K.fy * cam[:, 1] / zs + K.cy
        inside = (z > 1e-9) & (u >= -0.5) & (v >= -0.5) & (u < K.width - 0.5) & (v < K.height - 0.5)
        facing = np.sum(normals * (cent - pose.center), axis=1) < 0
        ui = np.clip(np.round(u).astype(int), 0, K.width - 1)
        vi = np.clip(np.round(v).astype(int), 0, K.height - 1)
        unoccluded = z <= near[vi, ui] * (1 + depth_tol) + 1e-9
        keep &= inside & facing & unoccluded
    return np.nonzero(keep)[0]
