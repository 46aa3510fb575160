import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqsplat.geometry import (BLENDER_TO_CV, blender_to_world_to_camera, euler_xyz_to_rotmat,
                               look_at_world_to_camera, quat_to_rotmat, quat_to_rotmat_backward,
                               rotmat_to_euler_xyz, rotmat_to_quat)

quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1)


@given(quats)
@settings(max_examples=50, deadline=None)
def test_rotation_is_orthonormal(q):
    R = quat_to_rotmat(np.array(q))
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)


def test_quat_roundtrip(rng):
    q = rng.normal(size=(20, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.sign(q[:, :1])
    back = np.array([rotmat_to_quat(R) for R in quat_to_rotmat(q)])
    assert np.allclose(back, q, atol=1e-10)


def test_quat_backward_matches_fd(rng):
    q = rng.normal(size=4)
    G = rng.normal(size=(3, 3))
    g = quat_to_rotmat_backward(q, G)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (np.sum(G * quat_to_rotmat(q + e)) - np.sum(G * quat_to_rotmat(q - e))) / (2 * h)
        assert np.isclose(g[i], fd, rtol=1e-6, atol=1e-8)


def test_euler_is_z_after_y_after_x():
    r = np.array([0.3, -0.2, 1.1])

    def rx(a):
        c, s = np.cos(a), np.sin(a)
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])

    def ry(a):
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])

    def rz(a):
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])

    assert np.allclose(euler_xyz_to_rotmat(r), rz(r[2]) @ ry(r[1]) @ rx(r[0]), atol=1e-14)
    assert np.allclose(rotmat_to_euler_xyz(euler_xyz_to_rotmat(r)), r)


def test_blender_identity_camera_looks_down():
    R, t = blender_to_world_to_camera(np.array([0.0, 0.0, 5.0]), np.zeros(3))
    p = R @ np.array([0.0, 0.0, 0.0]) + t
    assert np.allclose(p, [0, 0, 5])
    assert np.allclose(R, BLENDER_TO_CV)


def test_look_at_centers_target(rng):
    for _ in range(10):
        eye = rng.normal(size=3) * 3
        target = rng.normal(size=3)
        R, t = look_at_world_to_camera(eye, target)
        p = R @ target + t
        assert np.allclose(p[:2], 0, atol=1e-12)
        assert p[2] == pytest.approx(np.linalg.norm(target - eye))


def test_look_at_straight_down():
    R, t = look_at_world_to_camera([0, 0, 3], [0, 0, 0])
    assert np.allclose(R @ R.T, np.eye(3))
    assert np.allclose(R @ np.zeros(3) + t, [0, 0, 3])
