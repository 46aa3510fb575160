import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from seqsplat.geometry import rotmat_to_quat
from seqsplat.scene_io import CameraIntrinsics, CameraPose
from seqsplat.splats import LOW_PASS, Splats, build_covariance, logit, project, project_gaussian, sigmoid

K64 = CameraIntrinsics(50.0, 50.0, 32.0, 32.0, 64, 64)
IDENTITY = CameraPose([1, 0, 0, 0], [0, 0, 0])


def test_covariance_examples():
    assert np.allclose(build_covariance(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]))[0], np.eye(3))
    c = build_covariance(np.log([[2.0, 1.0, 1.0]]), np.array([[1.0, 0, 0, 0]]))[0]
    assert np.allclose(c, np.diag([4.0, 1.0, 1.0]))


def test_covariance_eigenvalues_and_sign(rng):
    ls = rng.normal(size=(20, 3))
    q = rng.normal(size=(20, 4))
    c = build_covariance(ls, q)
    assert np.allclose(c, np.transpose(c, (0, 2, 1)))
    for k in range(20):
        assert np.allclose(np.sort(np.linalg.eigvalsh(c[k])), np.sort(np.exp(2 * ls[k])), rtol=1e-10, atol=1e-12)
    assert np.allclose(build_covariance(ls, -q), c)


def test_activations():
    x = np.linspace(-5, 5, 11)
    assert np.allclose(logit(sigmoid(x)), x)
    s = Splats.create(np.zeros((2, 3)), scale=[0.5, 1, 2], opacity=0.3)
    assert np.allclose(s.scale, [0.5, 1, 2]) and np.allclose(s.opacity, 0.3)


def test_on_axis_projection():
    s = Splats.create([[0.0, 0.0, 5.0]], scale=0.1)
    p = project_gaussian(s, 0, IDENTITY, K64)
    assert np.allclose(p["mu2d"], [32, 32]) and p["view_z"] == 5


def test_culling():
    s = Splats.create([[0.0, 0.0, -1.0], [0, 0, 0.005], [1000.0, 0, 1], [0.1, 0, 2]], scale=0.1)
    proj = project(s, IDENTITY, K64)
    assert proj.valid.tolist() == [False, False, False, True]
    assert project_gaussian(s, 0, IDENTITY, K64) is None


def test_isotropic_footprint():
    sigma, z, f = 0.02, 5.0, 50.0
    s = Splats.create([[0.0, 0.0, z]], scale=sigma)
    cov = project(s, IDENTITY, K64).cov2d[0] - LOW_PASS * np.eye(2)
    expect = (f * sigma / z) ** 2
    assert np.allclose(np.diag(cov), expect, rtol=0.05)
    assert abs(cov[0, 1]) < 1e-12


def test_rigid_motion_equivariance(rng):
    mu = np.c_[rng.uniform(-1, 1, (10, 2)), rng.uniform(3, 5, 10)]
    s = Splats.create(mu, scale=np.exp(rng.uniform(-3, -1, (10, 3))), rot=rng.normal(size=(10, 4)))
    s.normalize_rotations()
    pose = CameraPose([0.95, 0.1, -0.2, 0.05], [0.2, -0.1, 0.5])
    G = Rotation.from_rotvec([0.3, -0.5, 0.9]).as_matrix()
    s2 = s.copy()
    s2.mu = s.mu @ G.T
    s2.rot = np.array([rotmat_to_quat(G @ Rotation.from_quat(np.r_[q[1:], q[0]]).as_matrix()) for q in s.rot])
    pose2 = CameraPose.from_matrix(pose.R @ G.T, pose.translation)
    a, b = project(s, pose, K64), project(s2, pose2, K64)
    assert np.allclose(a.mu2d, b.mu2d, atol=1e-9) and np.allclose(a.cov2d, b.cov2d, atol=1e-9)


def test_plane_normal_faces_camera(rng):
    mu = np.c_[rng.uniform(-1, 1, (50, 2)), rng.uniform(2, 6, 50)]
    s = Splats.create(mu, scale=np.exp(rng.uniform(-3, -1, (50, 3))), rot=rng.normal(size=(50, 4)))
    p = project(s, IDENTITY, K64)
    v = p.valid
    assert np.all(np.sum(p.normal[v] * p.mu_cam[v], axis=1) <= 0)
    assert np.allclose(p.distance[v], np.sum(p.normal[v] * p.mu_cam[v], axis=1))
    assert np.allclose(np.linalg.norm(p.normal[v], axis=1), 1)


def test_normal_is_smallest_axis():
    s = Splats.create([[0.0, 0.0, 4.0]], scale=[0.2, 0.1, 0.001])
    p = project(s, IDENTITY, K64)
    assert np.allclose(p.normal[0], [0, 0, -1])
    assert p.distance[0] == pytest.approx(-4.0)
