import numpy as np
import pytest

from helpers import Objective, central_difference, random_appearance, random_camera, random_splats, \
    relative_error, smooth_indices, structure
from seqsplat.rasterizer import backward, depth_from_plane, pixel_rays, render, render_reference
from seqsplat.scene_io import CameraIntrinsics, CameraPose
from seqsplat.splats import Splats

K32 = CameraIntrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
IDENTITY = CameraPose([1, 0, 0, 0], [0, 0, 0])


def test_empty_scene_is_background():
    s = Splats.create(np.zeros((0, 3)))
    o = render(s, np.zeros((0, 3)), IDENTITY, K32, background=(0.1, 0.2, 0.3))
    assert np.allclose(o.color, [0.1, 0.2, 0.3]) and not o.alpha.any()
    assert not o.depth_valid.any()


def test_opaque_splat_color():
    s = Splats.create([[0.0, 0.0, 3.0]], scale=[0.3, 0.3, 0.001])
    s.opacity_logit[:] = 12.0
    c = np.array([[0.2, 0.7, 0.4]])
    o = render(s, c, IDENTITY, K32)
    assert np.allclose(o.color[16, 16], 0.99 * c[0], atol=1e-3)
    assert np.allclose(o.color[16, 16], c[0], atol=1e-2)


@pytest.mark.parametrize("seed", range(5))
def test_tiled_matches_reference_small(seed):
    rng = np.random.default_rng(seed)
    s = random_splats(rng, 20)
    K, pose = random_camera(rng)
    cols = rng.uniform(0, 1, (20, 3))
    a = render(s, cols, pose, K, (0.1, 0.5, 0.9))
    b = render_reference(s, cols, pose, K, (0.1, 0.5, 0.9))
    assert np.abs(a.color - b.color).max() < 1e-6
    assert np.abs(a.alpha - b.alpha).max() < 1e-6
    assert np.array_equal(a.depth_valid, b.depth_valid)
    assert np.abs(a.depth - b.depth)[a.depth_valid].max() < 1e-6


def test_alpha_is_product(rng):
    s = random_splats(rng, 10)
    K, pose = random_camera(rng)
    o = render_reference(s, s.base_color, pose, K)
    from seqsplat.splats import project
    p = project(s, pose, K)
    ys, xs = np.mgrid[0:K.height, 0:K.width].astype(float)
    T = np.ones((K.height, K.width))
    for i in np.nonzero(p.valid)[0]:
        dx, dy = xs - p.mu2d[i, 0], ys - p.mu2d[i, 1]
        a = s.opacity[i] * np.exp(-0.5 * (p.conic[i, 0] * dx**2 + 2 * p.conic[i, 1] * dx * dy + p.conic[i, 2] * dy**2))
        a = np.minimum(a, 0.99)
        T *= np.where(a >= 1 / 255, 1 - a, 1.0)
    assert np.allclose(o.alpha, 1 - T, atol=1e-9)


def test_order_independence(rng):
    s = random_splats(rng, 15)
    K, pose = random_camera(rng)
    perm = rng.permutation(15)
    a = render(s, s.base_color, pose, K)
    b = render(s.subset(perm), s.base_color[perm], pose, K)
    assert np.array_equal(a.color, b.color)


def test_equal_depth_tie_break():
    mu = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 3.0]])
    s = Splats.create(mu, scale=[0.3, 0.3, 0.001], opacity=0.6, base_color=[[1, 0, 0], [0, 0, 1]])
    a = render(s, s.base_color, IDENTITY, K32).color[16, 16]
    # the lower index is composited first
    assert a[0] > a[2]
    b = render(s.subset([1, 0]), s.base_color[[1, 0]], IDENTITY, K32).color[16, 16]
    assert b[2] > b[0]
    assert np.allclose(a, render_reference(s, s.base_color, IDENTITY, K32).color[16, 16], atol=1e-9)


def test_transmittance_monotone_and_alpha_bounds(rng):
    s = random_splats(rng, 40)
    K, pose = random_camera(rng)
    o = render(s, s.base_color, pose, K)
    assert o.alpha.min() >= 0 and o.alpha.max() <= 1
    assert np.all(o.final_T <= 1) and np.all(o.final_T >= 0)
    assert np.all(o.depth[o.depth_valid] > 0)


def test_render_deterministic(rng):
    s = random_splats(rng, 30)
    K, pose = random_camera(rng)
    a = render(s, s.base_color, pose, K)
    b = render(s, s.base_color, pose, K)
    for k in ("color", "alpha", "depth", "normal", "distance"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_depth_from_plane_cases():
    K = CameraIntrinsics(50.0, 55.0, 20.0, 15.0, 40, 30)
    N = np.zeros((30, 40, 3))
    N[..., 2] = -1.0
    D = np.full((30, 40), -5.0)
    depth, valid = depth_from_plane(N, D, K)
    assert valid.all() and np.abs(depth - 5.0).max() < 1e-9
    depth, _ = depth_from_plane(-N, -D, K)
    assert depth[15, 20] == pytest.approx(5.0, abs=1e-12)
    rays = pixel_rays(K)
    perp = np.cross(rays, [1.0, 0, 0])
    perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
    _, valid = depth_from_plane(perp, D, K)
    assert not valid.any()


def test_zero_upstream_gradient(rng):
    s = random_splats(rng, 10)
    K, pose = random_camera(rng)
    o = render(s, s.base_color, pose, K)
    g = backward(o, np.zeros((K.height, K.width, 3)), None, s, s.base_color, pose, K)
    for k in ("mu", "rot", "log_scale", "opacity_logit", "color"):
        assert not g[k].any()


def test_color_gradient_is_blend_weight():
    s = Splats.create([[0.0, 0.0, 3.0]], scale=[0.2, 0.2, 0.001], opacity=0.7)
    o = render(s, s.base_color, IDENTITY, K32)
    g = backward(o, np.ones((32, 32, 3)), None, s, s.base_color, IDENTITY, K32)
    assert np.allclose(g["color"][0], o.alpha.sum())


def test_culled_splats_have_zero_gradient(rng):
    s = random_splats(rng, 6)
    s.mu[0] = [0, 0, -2]
    K, pose = random_camera(rng)
    o = render(s, s.base_color, pose, K)
    g = backward(o, rng.normal(size=(K.height, K.width, 3)), rng.normal(size=(K.height, K.width)), s,
                 s.base_color, pose, K)
    for k in ("mu", "rot", "log_scale", "opacity_logit", "color"):
        assert not g[k][0].any()


@pytest.mark.parametrize("seed", range(2))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_splats(rng, 10)
    K, pose = random_camera(rng)
    app = random_appearance(rng)
    obj = Objective(rng, K, pose).condition(s, app)
    g = obj.gradients(s, app)
    for k in ("mu", "rot", "log_scale", "opacity_logit"):
        arr = getattr(s, k)
        idx, _ = smooth_indices(rng, arr, 8, lambda: structure(s, app, obj))
        num = central_difference(lambda: obj.value(s, app), arr, idx)
        assert relative_error(num, np.array([g[k][i] for i in idx])) < 1e-3, k
