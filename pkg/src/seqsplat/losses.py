"""Training objectives and their gradients w.r.t. rendered maps.

Masks passed to these functions follow the file convention: 1 marks a
transient pixel that must not contribute.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .rasterizer import RenderOutput, pixel_rays
from .scene_io import CameraIntrinsics, CameraPose
from .splats import Splats

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
NCC_PATCH = 7
NCC_STRIDE = 4
GEO_GATE_PX = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_pho: float = 0.2
    lambda_s: float = 100.0
    lambda_a: float = 0.01
    lambda_b: float = 0.2
    lambda_c: float = 0.05

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")


def _gauss_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero-padded separable window; symmetric, so it is its own adjoint
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def _as_hwc(img):
    img = np.asarray(img, np.float64)
    return img[..., None] if img.ndim == 2 else img


def _ssim_parts(a, b):
    mu_a, mu_b = _blur(a), _blur(b)
    saa = _blur(a * a) - mu_a**2
    sbb = _blur(b * b) - mu_b**2
    sab = _blur(a * b) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + C1
    n2 = 2 * sab + C2
    d1 = mu_a**2 + mu_b**2 + C1
    d2 = saa + sbb + C2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim(a: np.ndarray, b: np.ndarray):
    """Mean SSIM and the per-pixel map (channel-averaged, shape ``(H, W)``)."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    _, _, n1, n2, d1, d2 = _ssim_parts(a, b)
    smap = (n1 * n2 / (d1 * d2)).mean(axis=2)
    return float(smap.mean()), smap


def ssim_grad(a: np.ndarray, b: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``a`` of ``sum(weight * ssim_map(a, b))``; ``weight`` is ``(H, W)``."""
    a, b = _as_hwc(a), _as_hwc(b)
    c = a.shape[2]
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_parts(a, b)
    g_s = np.repeat(np.asarray(weight, np.float64)[..., None], c, axis=2) / c
    # S = n1 n2 / (d1 d2)
    g_n1 = g_s * n2 / (d1 * d2)
    g_n2 = g_s * n1 / (d1 * d2)
    g_d1 = -g_s * n1 * n2 / (d1**2 * d2)
    g_d2 = -g_s * n1 * n2 / (d1 * d2**2)
    # in terms of the blurred moments mu_a, E[a^2], E[ab]
    g_mu_a = g_n1 * 2 * mu_b + g_n2 * (-2 * mu_b) + g_d1 * 2 * mu_a + g_d2 * (-2 * mu_a)
    g_eaa = g_d2
    g_eab = 2 * g_n2
    return _blur(g_mu_a) + 2 * a * _blur(g_eaa) + b * _blur(g_eab)


def _include(mask, shape):
    if mask is None:
        return np.ones(shape)
    return 1.0 - (np.asarray(mask) != 0).astype(np.float64)


def photometric_map(Ca: np.ndarray, C: np.ndarray, lambda_pho: float = 0.2) -> np.ndarray:
    """Per-pixel ``(1-l) L1 + l (1 - SSIM)``, unmasked, shape ``(H, W)``."""
    l1 = np.abs(Ca - C).mean(axis=2)
    _, smap = ssim(Ca, C)
    return (1 - lambda_pho) * l1 + lambda_pho * (1 - smap)


def photometric_loss(Ca: np.ndarray, C: np.ndarray, mask=None, lambda_pho: float = 0.2):
    """Masked L1 + D-SSIM averaged over included pixels; returns ``(loss, dL/dCa)``.

    Transient pixels of the render are replaced by the target before SSIM so
    that no included pixel's window sees them.
    """
    Ca = np.asarray(Ca, np.float64)
    C = np.asarray(C, np.float64)
    if Ca.shape != C.shape:
        raise ValueError(f"shape mismatch {Ca.shape} vs {C.shape}")
    inc = _include(mask, Ca.shape[:2])
    count = inc.sum()
    if count == 0:
        return 0.0, np.zeros_like(Ca)
    Cm = np.where(inc[..., None] > 0, Ca, C)
    diff = Cm - C
    l1 = np.abs(diff).mean(axis=2)
    _, smap = ssim(Cm, C)
    per_px = (1 - lambda_pho) * l1 + lambda_pho * (1 - smap)
    loss = float((inc * per_px).sum() / count)
    c = Ca.shape[2]
    g = (1 - lambda_pho) * np.sign(diff) * (inc / (count * c))[..., None]
    g -= lambda_pho * ssim_grad(Cm, C, inc / count)
    g *= inc[..., None]
    return loss, g


def scale_loss(splats: Splats, lambda_s: float = 100.0):
    """``lambda_s * sum_i min(s_i)``; returns ``(loss, dL/dlog_scale)``."""
    s = splats.scale
    k = np.argmin(s, axis=1)
    rows = np.arange(len(s))
    smin = s[rows, k]
    g = np.zeros_like(s)
    g[rows, k] = lambda_s * smin  # d/dlog s = s
    return float(lambda_s * np.abs(smin).sum()), g


def unproject(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return depth[..., None] * pixel_rays(K)


def _cross(a, b):
    return np.cross(a, b)


def svgeo_loss(render: RenderOutput, K: CameraIntrinsics, mask=None):
    """Single-view normal consistency ``sum ||N_d - N||``.

    ``N_d`` comes from the 4-neighborhood of the depth map, oriented toward
    the camera like the rendered normals. Returns ``(loss, dL/dN, dL/dD)``
    and the number of pixels used, as a 4-tuple.
    """
    D = render.depth
    valid = render.depth_valid
    H, W = D.shape
    P = unproject(D, K)
    ok = np.zeros((H, W), bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1])
    if mask is not None:
        ok &= np.asarray(mask) == 0
    dx = np.zeros((H, W, 3))
    dy = np.zeros((H, W, 3))
    dx[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    dy[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    c = _cross(dy, dx)
    cn = np.linalg.norm(c, axis=-1)
    ok &= cn > 0
    safe_cn = np.where(ok, cn, 1.0)
    Nd = c / safe_cn[..., None]
    N = render.normal
    e_vec = Nd - N
    e = np.linalg.norm(e_vec, axis=-1)
    loss = float(np.where(ok, e, 0.0).sum())
    use = ok & (e > 0)
    safe_e = np.where(use, e, 1.0)
    g_Nd = np.where(use[..., None], e_vec / safe_e[..., None], 0.0)
    g_N = -g_Nd
    g_c = (g_Nd - Nd * np.sum(Nd * g_Nd, -1, keepdims=True)) / safe_cn[..., None]
    g_dy = _cross(dx, g_c)
    g_dx = _cross(g_c, dy)
    g_P = np.zeros((H, W, 3))
    g_P[1:-1, 2:] += g_dx[1:-1, 1:-1]
    g_P[1:-1, :-2] -= g_dx[1:-1, 1:-1]
    g_P[2:, 1:-1] += g_dy[1:-1, 1:-1]
    g_P[:-2, 1:-1] -= g_dy[1:-1, 1:-1]
    g_D = np.sum(g_P * pixel_rays(K), axis=-1)
    g_D = np.where(valid, g_D, 0.0)
    return loss, g_N, g_D, int(ok.sum())


def homography_for_patch(ref_pose: CameraPose, nbr_pose: CameraPose, K: CameraIntrinsics,
                         plane_normal: np.ndarray, plane_distance: float):
    """Plane-induced homography from reference to neighbor pixels.

    The plane is ``n . X = d`` in reference camera coordinates (``d`` as
    stored in the distance map), giving ``K (R + t n^T / d) K^-1``. Returns
    None when ``|d| < 1e-6``.
    """
    if abs(plane_distance) < 1e-6:
        return None
    R_rel, t_rel = relative_pose(ref_pose, nbr_pose)
    return _plane_h(K.matrix, K.inverse, R_rel, t_rel, plane_normal, plane_distance)


def relative_pose(ref_pose: CameraPose, nbr_pose: CameraPose):
    """``(R, t)`` taking reference camera coordinates to neighbor camera coordinates."""
    R_rel = nbr_pose.R @ ref_pose.R.T
    return R_rel, nbr_pose.translation - R_rel @ ref_pose.translation


def _plane_h(Km, Kinv, R_rel, t_rel, n, d):
    return Km @ (R_rel + np.outer(t_rel, np.asarray(n, np.float64)) / d) @ Kinv


def patch_centers(shape, patch: int = NCC_PATCH, stride: int = NCC_STRIDE):
    H, W = shape
    r = patch // 2
    ys = np.arange(r, H - r, stride)
    xs = np.arange(r, W - r, stride)
    return ys, xs


def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``img`` at float pixel coords; returns values, in-bounds flag, and interpolation parts."""
    H, W = img.shape[:2]
    inb = (x >= 0) & (y >= 0) & (x <= W - 1) & (y <= H - 1)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(int), W - 2 if W > 1 else 0)
    y0 = np.minimum(np.floor(yc).astype(int), H - 2 if H > 1 else 0)
    fx = xc - x0
    fy = yc - y0
    v00, v01 = img[y0, x0], img[y0, x0 + 1]
    v10, v11 = img[y0 + 1, x0], img[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    return val, inb, (x0, y0, fx, fy, v00, v01, v10, v11)


def mv_photometric_ncc(ref_gray: np.ndarray, nbr_gray: np.ndarray, H, patch_size: int = NCC_PATCH,
                       stride: int = NCC_STRIDE, mask=None):
    """Sum over reference patches of ``1 - NCC`` against the homography-warped neighbor.

    ``H`` is a single 3x3 matrix or an array ``(ny, nx, 3, 3)`` with one
    matrix per patch center from :func:`patch_centers` (entries may be NaN
    to skip a patch). Returns ``(loss, dL/dref_gray, patches_used)``.
    """
    ref = np.asarray(ref_gray, np.float64)
    nbr = np.asarray(nbr_gray, np.float64)
    ys, xs = patch_centers(ref.shape, patch_size, stride)
    Hs = np.asarray(H, np.float64)
    if Hs.shape == (3, 3):
        Hs = np.broadcast_to(Hs, (len(ys), len(xs), 3, 3))
    r = patch_size // 2
    off = np.arange(-r, r + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    grad = np.zeros_like(ref)
    loss = 0.0
    used = 0
    excl = None if mask is None else np.asarray(mask) != 0
    for iy, cy in enumerate(ys):
        for ix, cx in enumerate(xs):
            Hp = Hs[iy, ix]
            if not np.all(np.isfinite(Hp)):
                continue
            py, px = cy + oy, cx + ox
            if excl is not None and excl[py, px].any():
                continue
            q = Hp @ np.stack([px.ravel(), py.ravel(), np.ones(px.size)])
            if np.any(q[2] <= 1e-12):
                continue
            u, v = q[0] / q[2], q[1] / q[2]
            b, inb, _ = bilinear(nbr, u, v)
            if not inb.all():
                continue
            a = ref[py, px].ravel()
            ah = a - a.mean()
            bh = b - b.mean()
            sa, sb = ah @ ah, bh @ bh
            if sa < 1e-12 or sb < 1e-12:
                continue
            den = np.sqrt(sa * sb)
            ncc = (ah @ bh) / den
            loss += 1.0 - ncc
            used += 1
            g = -(bh / den - ncc * ah / sa)
            np.add.at(grad, (py.ravel(), px.ravel()), g)
    return float(loss), grad, used


def plane_homographies(ref_pose, nbr_pose, K, render: RenderOutput, patch_size=NCC_PATCH, stride=NCC_STRIDE):
    """Per-patch homographies from the rendered plane at each patch center (NaN where unusable)."""
    ys, xs = patch_centers(render.alpha.shape, patch_size, stride)
    out = np.full((len(ys), len(xs), 3, 3), np.nan)
    R_rel, t_rel = relative_pose(ref_pose, nbr_pose)
    Km, Kinv = K.matrix, K.inverse
    for iy, cy in enumerate(ys):
        for ix, cx in enumerate(xs):
            d = render.distance[cy, cx]
            if not render.depth_valid[cy, cx] or abs(d) < 1e-6:
                continue
            out[iy, ix] = _plane_h(Km, Kinv, R_rel, t_rel, render.normal[cy, cx], d)
    return out


def mv_geometric(ref: RenderOutput, nbr: RenderOutput, ref_pose: CameraPose, nbr_pose: CameraPose,
                 K: CameraIntrinsics, mask=None, gate: float = GEO_GATE_PX):
    """Forward-backward reprojection error through the two depth maps.

    Returns ``(loss, dL/dref_depth, dL/dnbr_depth, pixels_used)``; pixels
    whose round trip misses by more than ``gate`` pixels carry no loss.
    """
    Dr, Dn = ref.depth, nbr.depth
    Hh, Ww = Dr.shape
    R_rel, t_rel = relative_pose(ref_pose, nbr_pose)
    fx, fy, cx, cy = K.fx, K.fy, K.cx, K.cy
    ys, xs = np.mgrid[0:Hh, 0:Ww].astype(np.float64)
    rays = pixel_rays(K)
    Rr = rays @ R_rel.T
    Xn = Dr[..., None] * Rr + t_rel
    zn = Xn[..., 2]
    ok = ref.depth_valid & (zn > 1e-9)
    if mask is not None:
        ok &= np.asarray(mask) == 0
    zs = np.where(ok, zn, 1.0)
    un = fx * Xn[..., 0] / zs + cx
    vn = fy * Xn[..., 1] / zs + cy
    Ds, inb, (x0, y0, ax, ay, v00, v01, v10, v11) = bilinear(Dn, un, vn)
    nv = nbr.depth_valid
    ok &= inb & nv[y0, x0] & nv[y0, x0 + 1] & nv[y0 + 1, x0] & nv[y0 + 1, x0 + 1]
    rn = np.stack([Xn[..., 0] / zs, Xn[..., 1] / zs, np.ones_like(zs)], -1)
    Xn2 = Ds[..., None] * rn
    Xr2 = (Xn2 - t_rel) @ R_rel
    zr = Xr2[..., 2]
    ok &= zr > 1e-9
    zr_s = np.where(ok, zr, 1.0)
    u2 = fx * Xr2[..., 0] / zr_s + cx
    v2 = fy * Xr2[..., 1] / zr_s + cy
    eu, ev = u2 - xs, v2 - ys
    phi = np.hypot(eu, ev)
    use = ok & (phi <= gate)
    loss = float(np.where(use, phi, 0.0).sum())

    g_Dr = np.zeros_like(Dr)
    g_Dn = np.zeros_like(Dn)
    act = use & (phi > 0)
    if not act.any():
        return loss, g_Dr, g_Dn, int(use.sum())
    ph = np.where(act, phi, 1.0)
    gu2 = np.where(act, eu / ph, 0.0)
    gv2 = np.where(act, ev / ph, 0.0)
    a, b = Xr2[..., 0], Xr2[..., 1]
    g_Xr2 = np.stack([fx / zr_s * gu2, fy / zr_s * gv2,
                      -fx * a / zr_s**2 * gu2 - fy * b / zr_s**2 * gv2], -1)
    g_Xn2 = g_Xr2 @ R_rel.T
    g_Ds = np.sum(g_Xn2 * rn, -1)
    g_rn = Ds[..., None] * g_Xn2
    g_Xn = np.zeros_like(Xn)
    g_Xn[..., 0] += g_rn[..., 0] / zs
    g_Xn[..., 1] += g_rn[..., 1] / zs
    g_Xn[..., 2] += -(g_rn[..., 0] * Xn[..., 0] + g_rn[..., 1] * Xn[..., 1]) / zs**2
    # bilinear sample w.r.t. neighbor depth texels and sample location
    for dy_, dx_, wgt in ((0, 0, (1 - ay) * (1 - ax)), (0, 1, (1 - ay) * ax),
                          (1, 0, ay * (1 - ax)), (1, 1, ay * ax)):
        np.add.at(g_Dn, ((y0 + dy_)[act], (x0 + dx_)[act]), (g_Ds * wgt)[act])
    g_un = g_Ds * ((1 - ay) * (v01 - v00) + ay * (v11 - v10))
    g_vn = g_Ds * ((1 - ax) * (v10 - v00) + ax * (v11 - v01))
    g_Xn[..., 0] += fx / zs * g_un
    g_Xn[..., 1] += fy / zs * g_vn
    g_Xn[..., 2] += -fx * Xn[..., 0] / zs**2 * g_un - fy * Xn[..., 1] / zs**2 * g_vn
    g_Dr = np.where(act, np.sum(g_Xn * Rr, -1), 0.0)
    return loss, g_Dr, g_Dn, int(use.sum())
