"""Per-sequence appearance: embeddings plus a small MLP emitting an affine color transform.

For splat ``i`` seen from a frame of sequence ``s`` the MLP maps
``[h_i, q_s, d_i, c_i]`` (per-splat embedding, sequence embedding, unit view
direction, base color) to ``(alpha_i, beta_i)`` and the splat is drawn with
``alpha_i * c_i + beta_i``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene_io import CameraPose
from .splats import EMBED_DIM, Splats

HIDDEN = 128
DIR_DIM = 3
APP_MAGIC = b"MSGSAPP1"
LAYER_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class AppearanceModel:
    sequence_embeddings: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def create(cls, num_sequences: int, seed: int = 0, embed_dim: int = EMBED_DIM,
               hidden: int = HIDDEN) -> "AppearanceModel":
        """Hidden layers uniform in +-1/sqrt(fan_in); identity output head; zero embeddings."""
        rng = np.random.default_rng(seed)
        d_in = 2 * embed_dim + DIR_DIM + 3

        def uniform(fan_in, shape):
            lim = np.sqrt(1.0 / fan_in)
            return rng.uniform(-lim, lim, shape)

        return cls(
            sequence_embeddings=np.zeros((num_sequences, embed_dim)),
            w1=uniform(d_in, (d_in, hidden)), b1=uniform(d_in, hidden),
            w2=uniform(hidden, (hidden, hidden)), b2=uniform(hidden, hidden),
            w3=np.zeros((hidden, 6)), b3=np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
        )

    @property
    def num_sequences(self) -> int:
        return self.sequence_embeddings.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"sequence_embeddings": self.sequence_embeddings,
                **{k: getattr(self, k) for k in LAYER_NAMES}}

    def copy(self) -> "AppearanceModel":
        return AppearanceModel(**{k: v.copy() for k, v in self.params().items()})


def mlp_forward(model: AppearanceModel, x: np.ndarray):
    """Run the MLP on stacked inputs ``(n, 70)``; returns ``(alpha, beta, cache)``."""
    z1 = x @ model.w1 + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.w2 + model.b2
    a2 = np.maximum(z2, 0.0)
    out = a2 @ model.w3 + model.b3
    return out[:, :3], out[:, 3:], (x, z1, a1, z2, a2)


def mlp_inputs(h, q_seq, dirs, base_color) -> np.ndarray:
    h = np.atleast_2d(h)
    n = h.shape[0]
    return np.concatenate([h, np.broadcast_to(q_seq, (n, len(q_seq))), np.atleast_2d(dirs),
                           np.atleast_2d(base_color)], axis=1)


@dataclass
class TonedColors:
    colors: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    sequence_id: int
    dirs: np.ndarray
    offsets: np.ndarray
    cache: tuple = field(repr=False, default=())
    model: AppearanceModel | None = field(repr=False, default=None)

    def __len__(self):
        return len(self.colors)


def view_directions(mu: np.ndarray, pose: CameraPose):
    offsets = mu - pose.center
    return offsets / np.linalg.norm(offsets, axis=1, keepdims=True), offsets


def modulate_colors(model: AppearanceModel, splats: Splats, sequence_id: int, pose: CameraPose) -> TonedColors:
    if not 0 <= sequence_id < model.num_sequences:
        raise ValueError(f"sequence id {sequence_id} outside [0, {model.num_sequences})")
    dirs, offsets = view_directions(splats.mu, pose)
    x = mlp_inputs(splats.embedding, model.sequence_embeddings[sequence_id], dirs, splats.base_color)
    alpha, beta, cache = mlp_forward(model, x)
    colors = alpha * splats.base_color + beta
    return TonedColors(colors, alpha, beta, sequence_id, dirs, offsets, cache, model)


def identity_colors(splats: Splats) -> TonedColors:
    """Unmodulated base colors (alpha = 1, beta = 0), for plain splatting."""
    n = len(splats)
    return TonedColors(splats.base_color.copy(), np.ones((n, 3)), np.zeros((n, 3)), 0,
                       np.zeros((n, 3)), np.zeros((n, 3)))


def appearance_backward(toned: TonedColors, g_colors: np.ndarray, base_color: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``modulate_colors``.

    Returns gradients for the MLP layers, the (full) sequence embedding
    table, per-splat embeddings ``h``, base colors and splat means (through
    the view direction).
    """
    model = toned.model
    x, z1, a1, z2, a2 = toned.cache
    g_alpha = g_colors * base_color
    g_beta = g_colors
    g_out = np.concatenate([g_alpha, g_beta], axis=1)
    grads = {"w3": a2.T @ g_out, "b3": g_out.sum(0)}
    g_z2 = (g_out @ model.w3.T) * (z2 > 0)
    grads["w2"] = a1.T @ g_z2
    grads["b2"] = g_z2.sum(0)
    g_z1 = (g_z2 @ model.w2.T) * (z1 > 0)
    grads["w1"] = x.T @ g_z1
    grads["b1"] = g_z1.sum(0)
    g_x = g_z1 @ model.w1.T
    e = model.sequence_embeddings.shape[1]
    g_seq = np.zeros_like(model.sequence_embeddings)
    g_seq[toned.sequence_id] = g_x[:, e:2 * e].sum(0)
    grads["sequence_embeddings"] = g_seq
    grads["h"] = g_x[:, :e]
    g_dir = g_x[:, 2 * e:2 * e + DIR_DIM]
    grads["base_color"] = g_colors * toned.alpha + g_x[:, 2 * e + DIR_DIM:]
    d = toned.dirs
    r = np.linalg.norm(toned.offsets, axis=1, keepdims=True)
    grads["mu"] = (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / r
    return grads


# --------------------------------------------------------------------------
# checkpoint: magic, u32 layer count, (u32 in, u32 out) per layer,
# u32 num_sequences, u32 embed_dim, then float32 weights and biases per layer,
# then the embedding table; all little-endian.

def appearance_to_bytes(model: AppearanceModel) -> bytes:
    layers = [(model.w1, model.b1), (model.w2, model.b2), (model.w3, model.b3)]
    head = APP_MAGIC + struct.pack("<I", len(layers))
    for w, _ in layers:
        head += struct.pack("<II", *w.shape)
    head += struct.pack("<II", *model.sequence_embeddings.shape)
    body = b"".join(np.asarray(a, "<f4").tobytes() for w, b in layers for a in (w, b))
    body += np.asarray(model.sequence_embeddings, "<f4").tobytes()
    return head + body


def appearance_from_bytes(data: bytes, offset: int = 0) -> tuple[AppearanceModel, int]:
    if data[offset:offset + 8] != APP_MAGIC:
        raise ValueError(f"bad appearance magic {data[offset:offset + 8]!r}")
    pos = offset + 8
    (n_layers,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", data, pos))
        pos += 8
    n_seq, e = struct.unpack_from("<II", data, pos)
    pos += 8

    def take(count):
        nonlocal pos
        arr = np.frombuffer(data, "<f4", count, pos).astype(np.float64)
        pos += 4 * count
        return arr

    arrays = []
    for rows, cols in shapes:
        arrays.append(take(rows * cols).reshape(rows, cols))
        arrays.append(take(cols))
    emb = take(n_seq * e).reshape(n_seq, e)
    return AppearanceModel(emb, *arrays), pos


def save_appearance(path: str | Path, model: AppearanceModel) -> None:
    Path(path).write_bytes(appearance_to_bytes(model))


def load_appearance(path: str | Path) -> AppearanceModel:
    return appearance_from_bytes(Path(path).read_bytes())[0]
