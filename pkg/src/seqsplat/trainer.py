"""Two-stage training of splats plus the appearance model.

Stage 1 fits colors with the masked photometric loss and the scale
regularizer, using segmenter masks. At the stage boundary the masks are
refined once from per-entity error, and stage 2 adds the single-view normal
loss and the multi-view geometric and NCC terms.
"""
from __future__ import annotations

import configparser
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .appearance import (AppearanceModel, appearance_backward, appearance_from_bytes, appearance_to_bytes,
                         modulate_colors)
from .config import fill_dataclass, format_dataclass
from .geometry import quat_to_rotmat
from .losses import (LossWeights, mv_geometric, mv_photometric_ncc, photometric_loss, photometric_map,
                     plane_homographies, scale_loss, svgeo_loss)
from .mask_refine import dataset_thresholds, refine_masks
from .metrics import EvalReport
from .rasterizer import RenderOutput, backward, render
from .scene_io import CameraIntrinsics, CameraPose, Frame, MultiSequenceDataset
from .splats import EMBED_DIM, Splats

CKPT_MAGIC = b"MSGSCKP1"
GRAY = np.array([0.299, 0.587, 0.114])
SPLAT_GROUPS = ("mu", "rot", "log_scale", "opacity_logit", "base_color", "embedding")
MLP_GROUPS = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 30000
    seed: int = 0
    stage2_start: int = -1  # -1: iterations // 2
    lambda_pho: float = 0.2
    lambda_s: float = 100.0
    lambda_a: float = 0.01
    lambda_b: float = 0.2
    lambda_c: float = 0.05
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_rot: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_mlp: float = 1e-3
    lr_embedding: float = 1e-3
    densify_from: int = 500
    densify_until_frac: float = 0.6
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_splats: int = 20000
    init_opacity: float = 0.1
    shared_embedding: bool = False
    use_masks: bool = True
    refine: bool = True
    rho1_pct: float = 70.0
    rho2_pct: float = 80.0
    dilation_px: int = 3
    drop_large_sam: bool = False
    multiview: bool = True
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.iterations > 0 and not self.stage2 <= self.iterations:
            raise ValueError(f"stage-2 start {self.stage2} is past the last iteration {self.iterations}")
        for k in ("lr_mu", "lr_mu_final", "lr_rot", "lr_scale", "lr_opacity", "lr_color", "lr_mlp", "lr_embedding"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be > 0")
        if self.densify_interval <= 0:
            raise ValueError("densify_interval must be > 0")

    @property
    def stage2(self) -> int:
        return self.iterations // 2 if self.stage2_start < 0 else self.stage2_start

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_pho, self.lambda_s, self.lambda_a, self.lambda_b, self.lambda_c)

    def echo(self) -> str:
        return format_dataclass(self, "train")


def desk_config(**overrides) -> TrainConfig:
    """Preset for 64x64 synthetic scenes: 2000 iterations, coarser densification."""
    base = dict(iterations=2000, densify_grad_threshold=3e-3)
    base.update(overrides)
    return TrainConfig(**base)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainedModel:
    splats: Splats
    appearance: AppearanceModel
    config: TrainConfig
    loss_log: list = field(default_factory=list)
    refined_masks: dict = field(default_factory=dict)

    def sequence_slot(self, sequence_id: int) -> int:
        return 0 if self.config.shared_embedding else sequence_id

    def render(self, pose: CameraPose, K: CameraIntrinsics, sequence_id: int | None = None) -> RenderOutput:
        sid = pose.sequence_id if sequence_id is None else sequence_id
        toned = modulate_colors(self.appearance, self.splats, self.sequence_slot(sid), pose)
        return render(self.splats, toned.colors, pose, K, self.config.background)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, a: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(a), np.zeros_like(a), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam; returns ``(new_param, new_state)``."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def position_lr(cfg: TrainConfig, it: int, extent: float) -> float:
    """Log-linear decay from ``lr_mu`` to ``lr_mu_final``, scaled by scene extent."""
    t = min(max(it / max(cfg.iterations, 1), 0.0), 1.0)
    return extent * float(np.exp(np.log(cfg.lr_mu) * (1 - t) + np.log(cfg.lr_mu_final) * t))


# --------------------------------------------------------------------------
# initialization and densification

def scene_extent(poses: list[CameraPose]) -> float:
    centers = np.array([p.center for p in poses])
    return 1.1 * max(float(np.linalg.norm(centers - centers.mean(0), axis=1).max()), 1e-6)


def init_splats(points: np.ndarray, colors: np.ndarray, opacity: float = 0.1, embed_dim: int = EMBED_DIM) -> Splats:
    """Isotropic splats at the sparse points, sized by the three nearest neighbours."""
    points = np.asarray(points, np.float64)
    n = len(points)
    if n == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(points).query(points, k=k)
        d2 = np.mean(d[:, 1:] ** 2, axis=1)
    else:
        d2 = np.ones(1)
    scale = np.sqrt(np.maximum(d2, 1e-10))
    return Splats.create(points, np.repeat(scale[:, None], 3, 1), None, opacity, colors,
                         np.zeros((n, embed_dim)))


def densify_and_prune(splats: Splats, grad_stats: tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
                      extent: float, rng: np.random.Generator):
    """Clone small / split large high-gradient splats, then prune transparent ones.

    Returns ``(splats', source)`` where ``source[j]`` is the index of the
    splat that row ``j`` came from, or -1 for a newly created splat.
    """
    accum, count = grad_stats
    avg = np.where(count > 0, accum / np.maximum(count, 1), 0.0)
    hot = avg > cfg.densify_grad_threshold
    big = splats.scale.max(axis=1) > cfg.percent_dense * extent
    room = cfg.max_splats - len(splats)
    clone_idx = np.nonzero(hot & ~big)[0]
    split_idx = np.nonzero(hot & big)[0]
    if room <= 0:
        clone_idx = split_idx = np.zeros(0, int)
    else:
        clone_idx = clone_idx[:room]
        split_idx = split_idx[:max(room - len(clone_idx), 0)]

    parts = [splats]
    source = [np.arange(len(splats))]
    if len(clone_idx):
        parts.append(splats.subset(clone_idx))
        source.append(np.full(len(clone_idx), -1))
    if len(split_idx):
        parent = splats.subset(split_idx)
        R = quat_to_rotmat(parent.rot)
        kids = []
        for _ in range(2):
            local = rng.normal(0.0, 1.0, (len(split_idx), 3)) * parent.scale
            child = parent.copy()
            child.mu = parent.mu + np.einsum("nij,nj->ni", R, local)
            child.log_scale = parent.log_scale - np.log(1.6)
            kids.append(child)
        parts += kids
        source += [np.full(len(split_idx), -1)] * 2
    out = Splats.concat(parts)
    src = np.concatenate(source)
    keep = np.ones(len(out), bool)
    keep[split_idx] = False
    keep &= out.opacity >= cfg.prune_opacity
    return out.subset(keep), src[keep]


# --------------------------------------------------------------------------
# training

def _neighbors(frames: list[Frame]) -> list[int]:
    """Nearest other frame of the same sequence by camera center, or -1."""
    centers = np.array([f.pose.center for f in frames])
    out = []
    for i, f in enumerate(frames):
        best, best_d = -1, np.inf
        for j, g in enumerate(frames):
            if j == i or g.sequence_id != f.sequence_id:
                continue
            d = float(np.linalg.norm(centers[i] - centers[j]))
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return out


def _check(name: str, value: float, it: int):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {name} loss at iteration {it}")


def compute_error_maps(model: TrainedModel, dataset: MultiSequenceDataset, frames: list[Frame] | None = None):
    """Per-pixel unmasked photometric loss between each frame and its render."""
    frames = dataset.train_frames if frames is None else frames
    out = []
    for f in frames:
        r = model.render(f.pose, dataset.intrinsics(f))
        out.append(photometric_map(r.color, f.image, model.config.lambda_pho))
    return out


def refine_dataset_masks(model: TrainedModel, dataset: MultiSequenceDataset, frames: list[Frame]):
    errs = compute_error_maps(model, dataset, frames)
    cfg = model.config
    th = dataset_thresholds(((f.masks.sam, f.masks.entity, e) for f, e in zip(frames, errs)),
                            cfg.rho1_pct, cfg.rho2_pct)
    return [refine_masks(f.masks.sam, f.masks.entity, e, cfg.rho1_pct, cfg.rho2_pct, cfg.dilation_px,
                         thresholds=th, drop_large_sam=cfg.drop_large_sam) for f, e in zip(frames, errs)]


def train(dataset: MultiSequenceDataset, cfg: TrainConfig, log_every: int = 0) -> TrainedModel:
    frames = dataset.train_frames
    if not frames:
        raise ValueError("dataset has no training frames")
    rng = np.random.default_rng(cfg.seed)
    n_seq = 1 if cfg.shared_embedding else dataset.num_sequences
    splats = init_splats(dataset.points, dataset.point_colors, cfg.init_opacity)
    app = AppearanceModel.create(n_seq, seed=cfg.seed)
    model = TrainedModel(splats, app, cfg)
    if cfg.iterations == 0:
        return model

    extent = scene_extent([f.pose for f in frames])
    W = cfg.weights
    nbrs = _neighbors(frames)
    masks = [f.masks.sam if cfg.use_masks else None for f in frames]
    bg = np.asarray(cfg.background, np.float64)
    densify_until = int(cfg.densify_until_frac * cfg.iterations)

    s_state = {k: AdamState.zeros_like(getattr(splats, k)) for k in SPLAT_GROUPS}
    a_state = {k: AdamState.zeros_like(getattr(app, k)) for k in MLP_GROUPS + ("sequence_embeddings",)}
    lrs = {"rot": cfg.lr_rot, "log_scale": cfg.lr_scale, "opacity_logit": cfg.lr_opacity,
           "base_color": cfg.lr_color, "embedding": cfg.lr_embedding}
    grad_accum = np.zeros(len(splats))
    grad_count = np.zeros(len(splats))

    for it in range(cfg.iterations):
        stage2 = it >= cfg.stage2
        if it == cfg.stage2 and cfg.use_masks and cfg.refine:
            refined = refine_dataset_masks(model, dataset, frames)
            masks = refined
            model.refined_masks = {f.pose.image_path: m for f, m in zip(frames, refined)}

        fi = int(rng.integers(len(frames)))
        f = frames[fi]
        K = dataset.intrinsics(f)
        slot = model.sequence_slot(f.sequence_id)
        toned = modulate_colors(app, splats, slot, f.pose)
        out = render(splats, toned.colors, f.pose, K, bg)
        mask = masks[fi]

        terms = {}
        terms["pho"], d_color = photometric_loss(out.color, f.image, mask, W.lambda_pho)
        terms["scale"], g_scale = scale_loss(splats, W.lambda_s)
        d_depth = d_normal = None
        nbr_grads = None
        terms["svgeo"] = terms["mvgeo"] = terms["ncc"] = 0.0
        if stage2 and cfg.multiview:
            sv, g_N, g_D, cnt = svgeo_loss(out, K, mask)
            if cnt:
                terms["svgeo"] = W.lambda_c * sv / cnt
                d_normal = W.lambda_c * g_N / cnt
                d_depth = W.lambda_c * g_D / cnt
            j = nbrs[fi]
            if j >= 0:
                g = frames[j]
                Kn = dataset.intrinsics(g)
                nout = render(splats, splats.base_color, g.pose, Kn, bg)
                mv, g_Dr, g_Dn, used = mv_geometric(out, nout, f.pose, g.pose, K, mask)
                if used:
                    terms["mvgeo"] = W.lambda_a * mv / used
                    d_depth = (0.0 if d_depth is None else d_depth) + W.lambda_a * g_Dr / used
                    nbr_grads = backward(nout, None, W.lambda_a * g_Dn / used, splats, splats.base_color,
                                         g.pose, Kn)
                Hs = plane_homographies(f.pose, g.pose, K, out)
                ncc, g_gray, used = mv_photometric_ncc(out.color @ GRAY, g.image @ GRAY, Hs, mask=mask)
                if used:
                    terms["ncc"] = W.lambda_b * ncc / used
                    d_color = d_color + (W.lambda_b / used) * g_gray[..., None] * GRAY
        for k, v in terms.items():
            _check(k, v, it)
        total = sum(terms.values())
        _check("total", total, it)

        g = backward(out, d_color, d_depth, splats, toned.colors, f.pose, K, d_normal=d_normal)
        ga = appearance_backward(toned, g["color"], splats.base_color)
        grads = {"mu": g["mu"] + ga["mu"], "rot": g["rot"], "log_scale": g["log_scale"] + g_scale,
                 "opacity_logit": g["opacity_logit"], "base_color": ga["base_color"], "embedding": ga["h"]}
        if nbr_grads is not None:
            for k in ("mu", "rot", "log_scale", "opacity_logit"):
                grads[k] = grads[k] + nbr_grads[k]
        for k, v in grads.items():
            if not np.all(np.isfinite(v)):
                raise TrainingError(f"non-finite gradient for {k} at iteration {it}")

        lr_now = dict(lrs, mu=position_lr(cfg, it, extent))
        for k in SPLAT_GROUPS:
            new, s_state[k] = adam_step(getattr(splats, k), grads[k], s_state[k], lr_now[k])
            setattr(splats, k, new)
        splats.normalize_rotations()
        for k in MLP_GROUPS + ("sequence_embeddings",):
            lr = cfg.lr_embedding if k == "sequence_embeddings" else cfg.lr_mlp
            new, a_state[k] = adam_step(getattr(app, k), ga[k], a_state[k], lr)
            setattr(app, k, new)

        visible = out._proj.valid
        # screen-space gradients in normalized device units, as in common splatting practice
        grad_accum[visible] += g["mean2d_abs"][visible] * 0.5 * max(K.width, K.height)
        grad_count[visible] += 1

        row = {"iteration": it, "frame": fi, "total": total, **terms, "splats": len(splats)}
        model.loss_log.append(row)
        if log_every and it % log_every == 0:
            print(f"it {it} " + " ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}"
                                          for k, v in row.items() if k != "iteration"), flush=True)

        step = it + 1
        if cfg.densify_from <= step <= densify_until and step % cfg.densify_interval == 0:
            splats, src = densify_and_prune(splats, (grad_accum, grad_count), cfg, extent, rng)
            for k in SPLAT_GROUPS:
                st = s_state[k]
                m = np.zeros((len(src),) + st.m.shape[1:])
                v = np.zeros_like(m)
                old = src >= 0
                m[old], v[old] = st.m[src[old]], st.v[src[old]]
                s_state[k] = AdamState(m, v, st.step)
            grad_accum = np.zeros(len(splats))
            grad_count = np.zeros(len(splats))
            for k in SPLAT_GROUPS:
                if not np.all(np.isfinite(getattr(splats, k))):
                    raise TrainingError(f"non-finite {k} after iteration {it}")
            model.splats = splats

    model.splats = splats
    model.appearance = app
    return model


def evaluate(model: TrainedModel, dataset: MultiSequenceDataset, frames: list[Frame] | None = None) -> EvalReport:
    """PSNR/SSIM of each frame's render, plain and with its evaluation mask."""
    frames = dataset.test_frames if frames is None else frames
    rep = EvalReport()
    for f in frames:
        r = model.render(f.pose, dataset.intrinsics(f))
        rep.add(f.pose.image_path, f.sequence_id, r.color, f.image, f.eval_mask)
    return rep


# --------------------------------------------------------------------------
# checkpoint: magic, u32 splat count, u32 embedding dim, float32 splat arrays
# in field order, appearance block, u32 config length, config echo (utf-8).

def checkpoint_bytes(model: TrainedModel) -> bytes:
    s = model.splats
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", len(s), s.embedding.shape[1]))
    for k in SPLAT_GROUPS:
        buf.write(np.asarray(getattr(s, k), "<f4").tobytes())
    buf.write(appearance_to_bytes(model.appearance))
    echo = model.config.echo().encode()
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    return buf.getvalue()


def save_checkpoint(path: str | Path, model: TrainedModel) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:8]!r})")
    n, e = struct.unpack_from("<II", data, 8)
    pos = 16
    widths = {"mu": 3, "rot": 4, "log_scale": 3, "opacity_logit": 1, "base_color": 3, "embedding": e}
    arrays = {}
    for k in SPLAT_GROUPS:
        cnt = n * widths[k]
        arrays[k] = np.frombuffer(data, "<f4", cnt, pos).astype(np.float64).reshape(n, -1)
        pos += 4 * cnt
    arrays["opacity_logit"] = arrays["opacity_logit"].ravel()
    app, pos = appearance_from_bytes(data, pos)
    (ln,) = struct.unpack_from("<I", data, pos)
    echo = data[pos + 4:pos + 4 + ln].decode()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(echo)
    cfg = fill_dataclass(TrainConfig(), cp["train"])
    return TrainedModel(Splats(**arrays), app, cfg)


def write_loss_log(path: str | Path, log: list[dict]) -> None:
    cols = ["iteration", "frame", "total", "pho", "scale", "svgeo", "mvgeo", "ncc", "splats"]
    lines = [",".join(cols)]
    for r in log:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")
