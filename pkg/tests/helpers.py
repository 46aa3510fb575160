"""Shared scene builders and finite-difference helpers for the test suite."""
import numpy as np

from seqsplat.appearance import AppearanceModel, appearance_backward, modulate_colors
from seqsplat.rasterizer import backward, render
from seqsplat.scene_io import CameraIntrinsics, CameraPose
from seqsplat.rasterizer import ALPHA_MAX, ALPHA_MIN, pixel_rays
from seqsplat.splats import Splats, project


def random_splats(rng, n, depth=(3.0, 6.0), spread=1.0, log_scale=(-2.5, -1.5), embed_dim=32):
    mu = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    s = Splats.create(mu, scale=np.exp(rng.uniform(*log_scale, (n, 3))), rot=rng.normal(size=(n, 4)),
                      opacity=rng.uniform(0.2, 0.9, n), base_color=rng.uniform(0, 1, (n, 3)))
    s.normalize_rotations()
    s.embedding = rng.normal(0, 0.3, (n, embed_dim))
    return s


def random_camera(rng, size=32):
    K = CameraIntrinsics(1.25 * size, 1.3 * size, size / 2 + 0.3, size / 2 - 0.3, size, size)
    q = rng.normal(size=4) * [1, 0.05, 0.05, 0.05] + [3, 0, 0, 0]
    pose = CameraPose(q, rng.normal(0, 0.1, 3))
    return K, pose


def random_appearance(rng, n_seq=2):
    app = AppearanceModel.create(n_seq, seed=int(rng.integers(1 << 30)))
    # move off the identity head so every layer carries gradient
    app.w3 = rng.normal(0, 0.1, app.w3.shape)
    app.sequence_embeddings = rng.normal(0, 0.5, app.sequence_embeddings.shape)
    return app


class Objective:
    """Random linear functional of color, depth, normal and distance maps of a full render."""

    def __init__(self, rng, K, pose, sequence_id=1, background=(0.2, 0.3, 0.4)):
        H, W = K.height, K.width
        self.K, self.pose, self.sid, self.bg = K, pose, sequence_id, background
        self.wc = rng.normal(size=(H, W, 3))
        self.wd = rng.normal(size=(H, W)) * 0.1
        self.wn = rng.normal(size=(H, W, 3))
        self.wdist = rng.normal(size=(H, W)) * 0.1

    def condition(self, splats, app, min_cos=0.3, min_alpha=0.05):
        """Drop depth weights where depth is ill-conditioned (grazing blended normal or faint coverage)."""
        toned = modulate_colors(app, splats, self.sid, self.pose)
        o = render(splats, toned.colors, self.pose, self.K, self.bg)
        rays = pixel_rays(self.K)
        cos = np.abs(np.sum(o.normal * rays, -1)) / np.linalg.norm(rays, axis=-1)
        self.wd = np.where((cos >= min_cos) & (o.alpha >= min_alpha), self.wd, 0.0)
        return self

    def value(self, splats, app):
        toned = modulate_colors(app, splats, self.sid, self.pose)
        o = render(splats, toned.colors, self.pose, self.K, self.bg)
        d = np.where(o.depth_valid, o.depth, 0.0)
        return float((o.color * self.wc).sum() + (d * self.wd).sum() + (o.normal * self.wn).sum()
                     + (o.distance * self.wdist).sum())

    def gradients(self, splats, app):
        toned = modulate_colors(app, splats, self.sid, self.pose)
        o = render(splats, toned.colors, self.pose, self.K, self.bg)
        g = backward(o, self.wc, self.wd, splats, toned.colors, self.pose, self.K,
                     d_normal=self.wn, d_distance=self.wdist)
        ga = appearance_backward(toned, g["color"], splats.base_color)
        out = {"mu": g["mu"] + ga["mu"], "rot": g["rot"], "log_scale": g["log_scale"],
               "opacity_logit": g["opacity_logit"], "base_color": ga["base_color"], "embedding": ga["h"],
               "sequence_embeddings": ga["sequence_embeddings"]}
        for k in ("w1", "b1", "w2", "b2", "w3", "b3"):
            out[k] = ga[k]
        return out


def central_difference(f, arr, indices, h=1e-4):
    out = []
    for idx in indices:
        old = arr[idx]
        arr[idx] = old + h
        a = f()
        arr[idx] = old - h
        b = f()
        arr[idx] = old
        out.append((a - b) / (2 * h))
    return np.array(out)


def relative_error(numeric, analytic):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(numeric - analytic).max() / scale)


def sample_indices(rng, shape, count):
    total = int(np.prod(shape))
    flat = rng.choice(total, min(count, total), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def structure(splats, app, obj):
    """Discrete state of the pipeline at a parameter point.

    The render is piecewise smooth: its derivative is undefined where a
    pixel crosses the alpha skip or clamp, the depth order or the culling
    changes, a splat's normal axis or sign flips, a depth becomes valid, or
    an MLP unit crosses zero. A central difference is only compared with
    the analytic gradient when this state is equal at both probe points.
    """
    proj = project(splats, obj.pose, obj.K)
    H, W = obj.K.height, obj.K.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    dx = xs[..., None] - proj.mu2d[:, 0]
    dy = ys[..., None] - proj.mu2d[:, 1]
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    alpha = splats.opacity * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
    alpha = np.where(proj.valid, alpha, 0.0)
    toned = modulate_colors(app, splats, obj.sid, obj.pose)
    o = render(splats, toned.colors, obj.pose, obj.K, obj.bg)
    _, z1, _, z2, _ = toned.cache
    return (np.packbits(alpha >= ALPHA_MIN).tobytes(), np.packbits(alpha > ALPHA_MAX).tobytes(),
            proj.valid.tobytes(), np.argsort(proj.view_z, kind="stable").tobytes(),
            proj.normal_axis.tobytes(), proj.normal_sign.tobytes(), o.depth_valid.tobytes(),
            np.packbits(z1 > 0).tobytes(), np.packbits(z2 > 0).tobytes())


def smooth_indices(rng, arr, count, signature, h=1e-4, max_tries=None):
    """Draw up to ``count`` entries of ``arr`` whose +-h probes keep ``signature()`` unchanged."""
    total = int(np.prod(arr.shape))
    order = rng.permutation(total)
    base = signature()
    picked, skipped = [], 0
    for flat in order[: (max_tries or total)]:
        idx = np.unravel_index(int(flat), arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = signature()
        arr[idx] = old - h
        down = signature()
        arr[idx] = old
        if up == base and down == base:
            picked.append(idx)
            if len(picked) == count:
                break
        else:
            skipped += 1
    return picked, skipped
