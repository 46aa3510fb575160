"""Tile-based front-to-back alpha blending of projected splats.

``render`` bins splats into 16x16 tiles and blends each pixel's list in a
numba kernel; ``render_reference`` evaluates every splat at every pixel in
plain numpy and exists to check the tiled path. ``backward`` is the exact
adjoint of ``render``.

Besides color, each pixel blends the splats' plane normals and plane
distances with the color weights. With unnormalized sums ``Sn`` and ``Sd``
the exported maps are ``N = Sn/|Sn|`` and ``D̂ = Sd/|Sn|``, so the derived
depth ``D̂ / (N . K^-1 p)`` equals ``Sd / (Sn . K^-1 p)`` and does not depend
on coverage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .scene_io import CameraIntrinsics, CameraPose
from .splats import Projected, Splats, project, project_backward

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-9
DEPTH_EPS = 1e-6


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    distance: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray
    # per-pixel [start, stop) into the tile's splat list actually blended
    contrib_index: np.ndarray | None = None
    normal_sum: np.ndarray | None = None
    distance_sum: np.ndarray | None = None
    final_T: np.ndarray | None = None
    background: np.ndarray | None = None
    # replay state for backward()
    _proj: Projected | None = field(default=None, repr=False)
    _tile_ranges: np.ndarray | None = field(default=None, repr=False)
    _point_list: np.ndarray | None = field(default=None, repr=False)

    def image(self) -> np.ndarray:
        """Color clamped to [0, 1] for export."""
        return np.clip(self.color, 0.0, 1.0)


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """``K^-1 [x, y, 1]`` for every pixel, shape ``(H, W, 3)``. Pixel centers sit on integers."""
    ys, xs = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    return np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=-1)


def depth_from_plane(normal: np.ndarray, distance: np.ndarray, K: CameraIntrinsics):
    """Per-pixel depth of the blended plane along each pixel ray.

    Returns ``(depth, valid)``; pixels whose ray is (nearly) parallel to the
    plane, or whose depth is not positive, are flagged invalid and hold 0.
    """
    rays = pixel_rays(K)
    denom = np.sum(normal * rays, axis=-1)
    ok = np.abs(denom) >= DEPTH_EPS
    depth = np.where(ok, distance / np.where(ok, denom, 1.0), 0.0)
    ok &= depth > 0
    return np.where(ok, depth, 0.0), ok


def _finish(K, color, final_T, sn, sd, background):
    alpha = 1.0 - final_T
    s = np.linalg.norm(sn, axis=-1)
    has = s > 0
    safe = np.where(has, s, 1.0)
    normal = np.where(has[..., None], sn / safe[..., None], 0.0)
    distance = np.where(has, sd / safe, 0.0)
    rays = pixel_rays(K)
    denom = np.sum(sn * rays, axis=-1)
    ok = has & (np.abs(denom) >= DEPTH_EPS * safe)
    depth = np.where(ok, sd / np.where(ok, denom, 1.0), 0.0)
    ok &= depth > 0
    depth = np.where(ok, depth, 0.0)
    color = color + final_T[..., None] * background
    return RenderOutput(color, alpha, distance, normal, depth, ok,
                        normal_sum=sn, distance_sum=sd, final_T=final_T, background=background)


def _sorted_visible(proj: Projected) -> np.ndarray:
    idx = np.nonzero(proj.valid)[0]
    # global depth order, ties broken by splat index
    return idx[np.lexsort((idx, proj.view_z[idx]))]


def _extents(proj: Projected, opacity: np.ndarray) -> np.ndarray:
    """Half-widths (x, y) of the region where ``opacity * g >= ALPHA_MIN``; negative = never."""
    lim = 2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_MIN)
    ext = np.sqrt(np.maximum(lim, 0.0)[:, None] * np.stack([proj.cov2d[:, 0, 0], proj.cov2d[:, 1, 1]], 1))
    ext = ext * (1.0 + 1e-9) + 1e-9
    ext[lim <= 0] = -1.0
    return ext


@nb.njit(cache=True)
def _bin(order, mu2d, ext, width, height, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    boxes = np.full((order.size, 4), -1, np.int64)
    for k in range(order.size):
        i = order[k]
        if ext[i, 0] < 0:
            continue
        x0 = max(int(math.ceil(mu2d[i, 0] - ext[i, 0])), 0)
        x1 = min(int(math.floor(mu2d[i, 0] + ext[i, 0])), width - 1)
        y0 = max(int(math.ceil(mu2d[i, 1] - ext[i, 1])), 0)
        y1 = min(int(math.floor(mu2d[i, 1] + ext[i, 1])), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        tx0, tx1, ty0, ty1 = x0 // 16, x1 // 16, y0 // 16, y1 // 16
        boxes[k, 0], boxes[k, 1], boxes[k, 2], boxes[k, 3] = tx0, tx1, ty0, ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    ranges = np.zeros((n_tiles, 2), np.int64)
    total = 0
    for t in range(n_tiles):
        ranges[t, 0] = total
        total += counts[t + 1]
        ranges[t, 1] = total
    fill = ranges[:, 0].copy()
    plist = np.empty(total, np.int64)
    for k in range(order.size):
        if boxes[k, 0] < 0:
            continue
        for ty in range(boxes[k, 2], boxes[k, 3] + 1):
            for tx in range(boxes[k, 0], boxes[k, 1] + 1):
                t = ty * tiles_x + tx
                plist[fill[t]] = order[k]
                fill[t] += 1
    return ranges, plist


@nb.njit(parallel=True, cache=True)
def _forward_kernel(ranges, plist, mu2d, conic, opac, colors, normals, dists,
                    width, height, tiles_x, t_min):
    color = np.zeros((height, width, 3))
    sn = np.zeros((height, width, 3))
    sd = np.zeros((height, width))
    final_T = np.ones((height, width))
    contrib = np.zeros((height, width, 2), np.int64)
    n_tiles = ranges.shape[0]
    for t in nb.prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start, stop = ranges[t, 0], ranges[t, 1]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                T = 1.0
                c0 = c1 = c2 = 0.0
                n0 = n1 = n2 = 0.0
                d = 0.0
                last = start
                for k in range(start, stop):
                    i = plist[k]
                    dx = px - mu2d[i, 0]
                    dy = py - mu2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy)
                    a = opac[i] * math.exp(power)
                    if a > 0.99:
                        a = 0.99
                    if a < 1.0 / 255.0:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < t_min:
                        break
                    w = a * T
                    c0 += w * colors[i, 0]
                    c1 += w * colors[i, 1]
                    c2 += w * colors[i, 2]
                    n0 += w * normals[i, 0]
                    n1 += w * normals[i, 1]
                    n2 += w * normals[i, 2]
                    d += w * dists[i]
                    T = test_T
                    last = k + 1
                color[py, px, 0] = c0
                color[py, px, 1] = c1
                color[py, px, 2] = c2
                sn[py, px, 0] = n0
                sn[py, px, 1] = n1
                sn[py, px, 2] = n2
                sd[py, px] = d
                final_T[py, px] = T
                contrib[py, px, 0] = start
                contrib[py, px, 1] = last
    return color, sn, sd, final_T, contrib


def render(splats: Splats, toned_colors: np.ndarray, pose: CameraPose, K: CameraIntrinsics,
           background=(0.0, 0.0, 0.0), t_min: float = T_MIN) -> RenderOutput:
    """Tiled renderer. ``t_min`` is the early-termination transmittance."""
    toned_colors = np.asarray(toned_colors, np.float64)
    if toned_colors.shape != (len(splats), 3):
        raise ValueError(f"toned_colors has shape {toned_colors.shape}, expected ({len(splats)}, 3)")
    bg = np.asarray(background, np.float64)
    proj = project(splats, pose, K)
    opac = splats.opacity
    order = _sorted_visible(proj)
    tiles_x = (K.width + TILE - 1) // TILE
    tiles_y = (K.height + TILE - 1) // TILE
    ranges, plist = _bin(order, proj.mu2d, _extents(proj, opac), K.width, K.height, tiles_x, tiles_y)
    color, sn, sd, final_T, contrib = _forward_kernel(
        ranges, plist, proj.mu2d, proj.conic, opac, toned_colors, proj.normal, proj.distance,
        K.width, K.height, tiles_x, float(t_min))
    out = _finish(K, color, final_T, sn, sd, bg)
    out.contrib_index = contrib
    out._proj, out._tile_ranges, out._point_list = proj, ranges, plist
    return out


def render_reference(splats: Splats, toned_colors: np.ndarray, pose: CameraPose, K: CameraIntrinsics,
                     background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Untiled oracle: every splat at every pixel, global sort, no early termination."""
    toned_colors = np.asarray(toned_colors, np.float64)
    if toned_colors.shape != (len(splats), 3):
        raise ValueError(f"toned_colors has shape {toned_colors.shape}, expected ({len(splats)}, 3)")
    bg = np.asarray(background, np.float64)
    proj = project(splats, pose, K)
    opac = splats.opacity
    H, W = K.height, K.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    color = np.zeros((H, W, 3))
    sn = np.zeros((H, W, 3))
    sd = np.zeros((H, W))
    for i in _sorted_visible(proj):
        dx = xs - proj.mu2d[i, 0]
        dy = ys - proj.mu2d[i, 1]
        a, b, c = proj.conic[i]
        alpha = np.minimum(opac[i] * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy)), ALPHA_MAX)
        alpha[alpha < ALPHA_MIN] = 0.0
        w = alpha * T
        color += w[..., None] * toned_colors[i]
        sn += w[..., None] * proj.normal[i]
        sd += w * proj.distance[i]
        T = T * (1.0 - alpha)
    return _finish(K, color, T, sn, sd, bg)


@nb.njit(parallel=True, cache=True)
def _backward_kernel(ranges, plist, contrib, final_T, mu2d, conic, opac, colors, normals, dists,
                     bg, g_color, g_sn, g_sd, g_alpha, width, height, tiles_x):
    # one row of 13 partial gradients per tile-list entry:
    # color(3) normal(3) distance(1) mu2d(2) conic a,b,c(3) opacity(1)
    out = np.zeros((plist.size, 13))
    n_tiles = ranges.shape[0]
    for t in nb.prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                start = contrib[py, px, 0]
                last = contrib[py, px, 1]
                Tf = final_T[py, px]
                T_after = Tf
                gc0, gc1, gc2 = g_color[py, px, 0], g_color[py, px, 1], g_color[py, px, 2]
                gn0, gn1, gn2 = g_sn[py, px, 0], g_sn[py, px, 1], g_sn[py, px, 2]
                gd = g_sd[py, px]
                ga = g_alpha[py, px]
                acc0, acc1, acc2 = Tf * bg[0], Tf * bg[1], Tf * bg[2]
                accn0 = accn1 = accn2 = 0.0
                accd = 0.0
                for k in range(last - 1, start - 1, -1):
                    i = plist[k]
                    dx = px - mu2d[i, 0]
                    dy = py - mu2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy)
                    G = math.exp(power)
                    raw = opac[i] * G
                    a = raw
                    if a > 0.99:
                        a = 0.99
                    if a < 1.0 / 255.0:
                        continue
                    one_m = 1.0 - a
                    T_i = T_after / one_m
                    w = a * T_i
                    out[k, 0] += w * gc0
                    out[k, 1] += w * gc1
                    out[k, 2] += w * gc2
                    out[k, 3] += w * gn0
                    out[k, 4] += w * gn1
                    out[k, 5] += w * gn2
                    out[k, 6] += w * gd
                    g_a = (gc0 * (T_i * colors[i, 0] - acc0 / one_m)
                           + gc1 * (T_i * colors[i, 1] - acc1 / one_m)
                           + gc2 * (T_i * colors[i, 2] - acc2 / one_m)
                           + gn0 * (T_i * normals[i, 0] - accn0 / one_m)
                           + gn1 * (T_i * normals[i, 1] - accn1 / one_m)
                           + gn2 * (T_i * normals[i, 2] - accn2 / one_m)
                           + gd * (T_i * dists[i] - accd / one_m)
                           + ga * Tf / one_m)
                    acc0 += w * colors[i, 0]
                    acc1 += w * colors[i, 1]
                    acc2 += w * colors[i, 2]
                    accn0 += w * normals[i, 0]
                    accn1 += w * normals[i, 1]
                    accn2 += w * normals[i, 2]
                    accd += w * dists[i]
                    T_after = T_i
                    if raw > 0.99:
                        continue
                    out[k, 12] += g_a * G
                    g_p = g_a * raw
                    out[k, 7] += g_p * (conic[i, 0] * dx + conic[i, 1] * dy)
                    out[k, 8] += g_p * (conic[i, 1] * dx + conic[i, 2] * dy)
                    out[k, 9] += -0.5 * g_p * dx * dx
                    out[k, 10] += -0.5 * g_p * dx * dy
                    out[k, 11] += -0.5 * g_p * dy * dy
    return out


@nb.njit(cache=True)
def _reduce(plist, rows, n):
    acc = np.zeros((n, rows.shape[1]))
    for k in range(plist.size):
        acc[plist[k]] += rows[k]
    return acc


def map_gradients(out: RenderOutput, K: CameraIntrinsics, d_depth=None, d_normal=None, d_distance=None):
    """Convert gradients on the exported maps to gradients on ``(Sn, Sd)``."""
    H, W = out.alpha.shape
    sn, sd = out.normal_sum, out.distance_sum
    g_sn = np.zeros((H, W, 3))
    g_sd = np.zeros((H, W))
    s = np.linalg.norm(sn, axis=-1)
    has = s > 0
    safe = np.where(has, s, 1.0)
    N = out.normal
    if d_normal is not None:
        d_normal = np.where(has[..., None], d_normal, 0.0)
        g_sn += (d_normal - N * np.sum(N * d_normal, -1, keepdims=True)) / safe[..., None]
    if d_distance is not None:
        gdd = np.where(has, d_distance, 0.0)
        g_sd += gdd / safe
        g_sn += (-gdd * sd / safe**2)[..., None] * N
    if d_depth is not None:
        rays = pixel_rays(K)
        gD = np.where(out.depth_valid, d_depth, 0.0)
        denom = np.sum(sn * rays, -1)
        denom = np.where(out.depth_valid, denom, 1.0)
        g_sd += gD / denom
        g_sn += (-gD * sd / denom**2)[..., None] * rays
    return g_sn, g_sd


def backward(output: RenderOutput, d_color, d_depth, splats: Splats, toned_colors, pose: CameraPose,
             K: CameraIntrinsics, d_normal=None, d_distance=None, d_alpha=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. splat parameters and toned colors.

    ``d_color`` and ``d_depth`` may be None (treated as zero). Returns a dict
    with keys ``mu``, ``rot``, ``log_scale``, ``opacity_logit``, ``color``,
    and the screen-space ``mean2d_abs`` (used for densification statistics).
    """
    if output._proj is None:
        raise ValueError("backward needs the output of render(), not render_reference()")
    proj = output._proj
    H, W = output.alpha.shape
    n = len(splats)
    d_color = np.zeros((H, W, 3)) if d_color is None else np.asarray(d_color, np.float64)
    d_alpha = np.zeros((H, W)) if d_alpha is None else np.asarray(d_alpha, np.float64)
    g_sn, g_sd = map_gradients(output, K, d_depth, d_normal, d_distance)
    tiles_x = (K.width + TILE - 1) // TILE
    opac = splats.opacity
    rows = _backward_kernel(output._tile_ranges, output._point_list, output.contrib_index, output.final_T,
                            proj.mu2d, proj.conic, opac, np.asarray(toned_colors, np.float64),
                            proj.normal, proj.distance, output.background,
                            d_color, g_sn, g_sd, d_alpha, K.width, K.height, tiles_x)
    acc = _reduce(output._point_list, rows, n)
    g_conic = np.empty((n, 2, 2))
    g_conic[:, 0, 0] = acc[:, 9]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = acc[:, 10]
    g_conic[:, 1, 1] = acc[:, 11]
    geo = project_backward(splats, pose, K, proj, acc[:, 7:9], g_conic, acc[:, 3:6], acc[:, 6])
    return {
        "mu": geo["mu"],
        "rot": geo["rot"],
        "log_scale": geo["log_scale"],
        "opacity_logit": acc[:, 12] * opac * (1.0 - opac),
        "color": acc[:, 0:3],
        "mean2d_abs": np.linalg.norm(acc[:, 7:9], axis=1),
    }
