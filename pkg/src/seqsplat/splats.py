"""Gaussian primitives, 3D covariance and EWA projection into a pinhole camera."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import quat_to_rotmat, quat_to_rotmat_backward
from .scene_io import CameraIntrinsics, CameraPose

EMBED_DIM = 32
NEAR_PLANE = 0.01
FRUSTUM_DILATION = 1.3
LOW_PASS = 0.3


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Splats:
    """A set of anisotropic Gaussians stored as parallel arrays.

    Scale and opacity are kept in unconstrained form (log scale, opacity
    logit); use :attr:`scale` and :attr:`opacity` for the activated values.
    """

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    base_color: np.ndarray
    embedding: np.ndarray

    def __post_init__(self):
        n = len(self.mu)
        self.mu = np.asarray(self.mu, np.float64).reshape(n, 3)
        self.rot = np.asarray(self.rot, np.float64).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, np.float64).reshape(n)
        self.base_color = np.asarray(self.base_color, np.float64).reshape(n, 3)
        emb = np.asarray(self.embedding, np.float64)
        self.embedding = emb.reshape(n, emb.shape[-1] if emb.ndim > 1 else EMBED_DIM if n == 0 else -1)

    @classmethod
    def create(cls, mu, scale=None, rot=None, opacity=None, base_color=None, embedding=None,
               embed_dim: int = EMBED_DIM) -> "Splats":
        mu = np.atleast_2d(np.asarray(mu, np.float64))
        n = len(mu)
        scale = np.full((n, 3), 0.1) if scale is None else np.broadcast_to(scale, (n, 3))
        rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rot is None else np.broadcast_to(rot, (n, 4))
        opacity = np.full(n, 0.5) if opacity is None else np.broadcast_to(opacity, (n,))
        base_color = np.full((n, 3), 0.5) if base_color is None else np.broadcast_to(base_color, (n, 3))
        embedding = np.zeros((n, embed_dim)) if embedding is None else embedding
        return cls(mu.copy(), np.array(rot, np.float64), np.log(scale), logit(opacity),
                   np.array(base_color, np.float64), np.array(embedding, np.float64))

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @classmethod
    def param_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def copy(self) -> "Splats":
        return Splats(*(getattr(self, k).copy() for k in self.param_names()))

    def subset(self, idx) -> "Splats":
        return Splats(*(getattr(self, k)[idx] for k in self.param_names()))

    @staticmethod
    def concat(parts: list["Splats"]) -> "Splats":
        return Splats(*(np.concatenate([getattr(p, k) for p in parts]) for k in Splats.param_names()))

    def normalize_rotations(self) -> None:
        self.rot /= np.linalg.norm(self.rot, axis=1, keepdims=True)


def build_covariance(log_scale, rot) -> np.ndarray:
    """``R S S^T R^T`` for one splat (``(3,)``, ``(4,)``) or a batch."""
    log_scale = np.asarray(log_scale, np.float64)
    R = quat_to_rotmat(rot)
    M = R * np.exp(log_scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Projected:
    """Screen-space parameters for every splat of one view.

    ``valid`` marks splats that survived culling; other rows are undefined.
    ``conic`` is the inverse of ``cov2d`` stored as ``(a, b, c)`` for
    ``[[a, b], [b, c]]``.
    """

    mu2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    view_z: np.ndarray
    normal: np.ndarray
    distance: np.ndarray
    valid: np.ndarray
    # cached for the backward pass
    mu_cam: np.ndarray
    J: np.ndarray
    R_splat: np.ndarray
    normal_axis: np.ndarray
    normal_sign: np.ndarray


def project(splats: Splats, pose: CameraPose, K: CameraIntrinsics) -> Projected:
    Rw, t = pose.R, pose.translation
    mu_c = splats.mu @ Rw.T + t
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)
    u = K.fx * x / zs + K.cx
    v = K.fy * y / zs + K.cy

    n = len(splats)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2

    Rs = quat_to_rotmat(splats.rot) if n else np.zeros((0, 3, 3))
    M = Rs * splats.scale[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)
    T = J @ Rw
    cov2 = T @ cov3 @ np.swapaxes(T, 1, 2)
    cov2[:, 0, 0] += LOW_PASS
    cov2[:, 1, 1] += LOW_PASS
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
    conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=1)

    diag = np.hypot(K.width, K.height)
    off = np.hypot(u - K.width / 2.0, v - K.height / 2.0)
    valid = in_front & (off <= FRUSTUM_DILATION * diag)

    axis = np.argmin(splats.log_scale, axis=1) if n else np.zeros(0, int)
    n_w = Rs[np.arange(n), :, axis]
    n_c = n_w @ Rw.T
    sign = np.where(np.sum(n_c * mu_c, axis=1) > 0, -1.0, 1.0)
    n_c = n_c * sign[:, None]
    dist = np.sum(n_c * mu_c, axis=1)

    return Projected(np.stack([u, v], axis=1), cov2, conic, z, n_c, dist, valid,
                     mu_c, J, Rs, axis, sign)


def project_gaussian(splats: Splats, index: int, pose: CameraPose, K: CameraIntrinsics):
    """Project a single splat; returns ``None`` when it is culled."""
    p = project(splats.subset([index]), pose, K)
    if not p.valid[0]:
        return None
    return {"mu2d": p.mu2d[0], "cov2d": p.cov2d[0], "view_z": p.view_z[0],
            "plane_normal": p.normal[0], "plane_distance": p.distance[0]}


def project_backward(splats: Splats, pose: CameraPose, K: CameraIntrinsics, proj: Projected,
                     g_mu2d: np.ndarray, g_conic: np.ndarray, g_normal: np.ndarray,
                     g_distance: np.ndarray) -> dict[str, np.ndarray]:
    """Chain screen-space gradients back to ``mu``, ``rot`` and ``log_scale``.

    ``g_conic`` is the ``(N, 2, 2)`` gradient w.r.t. the full inverse 2D
    covariance (symmetric). Culled splats receive zero gradient.
    """
    n = len(splats)
    Rw = pose.R
    valid = proj.valid
    g_mu2d = np.where(valid[:, None], g_mu2d, 0.0)
    g_conic = np.where(valid[:, None, None], g_conic, 0.0)
    g_normal = np.where(valid[:, None], g_normal, 0.0)
    g_distance = np.where(valid, g_distance, 0.0)

    cov2 = proj.cov2d
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    Q = np.empty_like(cov2)
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (
        cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det)
    g_cov2 = -Q @ g_conic @ Q
    g_cov2 = 0.5 * (g_cov2 + np.swapaxes(g_cov2, 1, 2))

    J = proj.J
    T = J @ Rw
    scale = splats.scale
    Rs = proj.R_splat
    M = Rs * scale[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)

    g_T = 2.0 * g_cov2 @ T @ cov3
    g_cov3 = np.swapaxes(T, 1, 2) @ g_cov2 @ T
    g_M = 2.0 * g_cov3 @ M
    g_Rs = g_M * scale[:, None, :]
    g_scale = np.sum(g_M * Rs, axis=1)
    g_J = g_T @ Rw.T

    mu_c = proj.mu_cam
    x, y = mu_c[:, 0], mu_c[:, 1]
    z = np.where(valid, mu_c[:, 2], 1.0)
    fx, fy = K.fx, K.fy
    gu, gv = g_mu2d[:, 0], g_mu2d[:, 1]
    g_mu_c = np.zeros((n, 3))
    g_mu_c[:, 0] = gu * fx / z - g_J[:, 0, 2] * fx / z**2
    g_mu_c[:, 1] = gv * fy / z - g_J[:, 1, 2] * fy / z**2
    g_mu_c[:, 2] = (-gu * fx * x / z**2 - gv * fy * y / z**2
                    - g_J[:, 0, 0] * fx / z**2 - g_J[:, 1, 1] * fy / z**2
                    + g_J[:, 0, 2] * 2 * fx * x / z**3 + g_J[:, 1, 2] * 2 * fy * y / z**3)

    # plane distance d = n_c . mu_c with n_c = sign * Rw @ Rs[:, :, axis]
    n_c = proj.normal
    g_mu_c += g_distance[:, None] * n_c
    g_nc = g_normal + g_distance[:, None] * mu_c
    g_nw = (g_nc * proj.normal_sign[:, None]) @ Rw
    g_Rs[np.arange(n), :, proj.normal_axis] += g_nw

    g_rot = quat_to_rotmat_backward(splats.rot, g_Rs) if n else np.zeros((0, 4))
    g_mu = g_mu_c @ Rw
    g_mu[~valid] = 0.0
    g_rot[~valid] = 0.0
    g_log_scale = np.where(valid[:, None], g_scale * scale, 0.0)
    return {"mu": g_mu, "rot": g_rot, "log_scale": g_log_scale}
