"""Rotation helpers shared by the projection, meshing and trajectory code.

Quaternions are stored scalar-first ``(w, x, y, z)`` everywhere, matching the
COLMAP text format.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (unnormalized) quaternions.

    Accepts ``(4,)`` or ``(N, 4)``; the quaternion is normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_to_rotmat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given ``dL/dR`` for ``quat_to_rotmat(q)``.

    Includes the normalization step, so the returned gradient is orthogonal
    to ``q``.
    """
    single = np.ndim(q) == 1
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    G = grad_R.reshape(-1, 3, 3)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g00, g01, g02 = G[:, 0, 0], G[:, 0, 1], G[:, 0, 2]
    g10, g11, g12 = G[:, 1, 0], G[:, 1, 1], G[:, 1, 2]
    g20, g21, g22 = G[:, 2, 0], G[:, 2, 1], G[:, 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    gq = (gqn - qn * np.sum(gqn * qn, axis=1, keepdims=True)) / norm
    return gq[0] if single else gq


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion with non-negative ``w``."""
    xyzw = Rotation.from_matrix(R).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def euler_xyz_to_rotmat(r: np.ndarray) -> np.ndarray:
    """Blender-style ``XYZ`` Euler angles: ``R = Rz @ Ry @ Rx``."""
    return Rotation.from_euler("xyz", r).as_matrix()


def rotmat_to_euler_xyz(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_euler("xyz")


# Blender cameras look down their local -Z with +Y up; the renderer uses the
# OpenCV convention (+Z forward, +Y down).
BLENDER_TO_CV = np.diag([1.0, -1.0, -1.0])


def blender_to_world_to_camera(location: np.ndarray, euler: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convert a Blender camera (location, XYZ Euler) to a world-to-camera ``(R, t)``."""
    c2w = euler_xyz_to_rotmat(euler) @ BLENDER_TO_CV
    R = c2w.T
    t = -R @ np.asarray(location, dtype=np.float64)
    return R, t


def look_at_world_to_camera(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """OpenCV-convention world-to-camera pose looking from ``eye`` at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye
