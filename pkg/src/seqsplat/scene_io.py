"""Reconstruction, image and mask file formats, and the in-memory dataset model.

On-disk layout understood by :func:`load_dataset`::

    root/
      manifest.ini          sequence assignment (see ``parse_manifest``)
      sparse/cameras.txt    COLMAP text export
      sparse/images.txt
      sparse/points3D.txt
      images/*.png|*.ppm    8-bit RGB
      masks/sam/<stem>.png  single channel, nonzero = transient
      masks/entity/<stem>.png  16-bit single channel label ids

Float maps (error maps, depth, distance, normals) are stored as raw
little-endian float32 behind an 8-byte magic ``MSGSMAP1`` and two ``u32``
fields (width, height). The channel count is implied by the payload length.
"""
from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .geometry import quat_to_rotmat

MAP_MAGIC = b"MSGSMAP1"


class FormatError(ValueError):
    """Raised for malformed input files."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for k in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, k, float(getattr(self, k)))
        for k in ("width", "height"):
            object.__setattr__(self, k, int(getattr(self, k)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass
class CameraPose:
    """World-to-camera pose (OpenCV axes: +z forward, +y down)."""

    rotation: np.ndarray
    translation: np.ndarray
    sequence_id: int = 0
    image_path: str = ""
    camera_id: int = 1
    image_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.rotation)
        if n == 0:
            raise ValueError("zero quaternion")
        if abs(n - 1.0) > 1e-9:
            self.rotation = self.rotation / n

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray, **kw) -> "CameraPose":
        from .geometry import rotmat_to_quat

        return cls(rotmat_to_quat(np.asarray(R)), np.asarray(t), **kw)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.translation


@dataclass
class MaskSet:
    """Transient masks for one frame. ``sam`` uses 1 = transient."""

    sam: np.ndarray
    entity: np.ndarray
    refined: np.ndarray | None = None

    def __post_init__(self):
        if self.sam.shape != self.entity.shape:
            raise ValueError(f"sam mask {self.sam.shape} and entity map {self.entity.shape} differ")
        if self.entity.size and self.entity.min() < 0:
            raise ValueError("entity labels must be nonnegative")

    @classmethod
    def empty(cls, height: int, width: int) -> "MaskSet":
        return cls(np.zeros((height, width), np.uint8), np.zeros((height, width), np.int32))


@dataclass
class Frame:
    pose: CameraPose
    image: np.ndarray
    masks: MaskSet
    holdout: bool = False
    eval_mask: np.ndarray | None = None

    @property
    def sequence_id(self) -> int:
        return self.pose.sequence_id


@dataclass
class MultiSequenceDataset:
    cameras: dict[int, CameraIntrinsics]
    frames: list[Frame]
    points: np.ndarray
    point_colors: np.ndarray
    num_sequences: int = field(default=0)

    def __post_init__(self):
        if self.num_sequences == 0 and self.frames:
            self.num_sequences = max(f.sequence_id for f in self.frames) + 1
        for f in self.frames:
            if not 0 <= f.sequence_id < self.num_sequences:
                raise ValueError(f"frame {f.pose.image_path!r} has sequence id {f.sequence_id} >= {self.num_sequences}")
            if f.masks.sam.shape != f.image.shape[:2]:
                raise ValueError(f"mask shape {f.masks.sam.shape} != image shape {f.image.shape[:2]} for {f.pose.image_path!r}")

    @property
    def sequences(self) -> list[tuple[int, list[Frame]]]:
        return [(s, [f for f in self.frames if f.sequence_id == s]) for s in range(self.num_sequences)]

    @property
    def train_frames(self) -> list[Frame]:
        return [f for f in self.frames if not f.holdout]

    @property
    def test_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.holdout]

    def intrinsics(self, frame: Frame) -> CameraIntrinsics:
        return self.cameras[frame.pose.camera_id]


# --------------------------------------------------------------------------
# COLMAP text format

def _data_lines(text: str) -> Iterable[tuple[int, str]]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield lineno, s


def parse_cameras(text: str) -> dict[int, CameraIntrinsics]:
    cams: dict[int, CameraIntrinsics] = {}
    for lineno, line in _data_lines(text):
        parts = line.split()
        cam_id, model = int(parts[0]), parts[1]
        w, h = int(parts[2]), int(parts[3])
        params = [float(p) for p in parts[4:]]
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params[:3]
            cams[cam_id] = CameraIntrinsics(f, f, cx, cy, w, h)
        elif model == "PINHOLE":
            fx, fy, cx, cy = params[:4]
            cams[cam_id] = CameraIntrinsics(fx, fy, cx, cy, w, h)
        else:
            raise FormatError(f"cameras.txt line {lineno}: unsupported camera model {model}")
    return cams


def parse_images(text: str) -> list[CameraPose]:
    """Poses in file order. Every image spans two lines; the observation line is skipped.

    The observation line may be empty, so pairing is done on raw lines rather
    than on non-blank ones.
    """
    poses = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        s = lines[i].strip()
        if not s or s.startswith("#"):
            i += 1
            continue
        parts = s.split()
        if len(parts) < 10:
            raise FormatError(f"images.txt line {i + 1}: expected 10 fields, got {len(parts)}")
        q = np.array([float(v) for v in parts[1:5]])
        if np.linalg.norm(q) == 0:
            raise FormatError(f"images.txt line {i + 1}: zero-norm quaternion")
        t = np.array([float(v) for v in parts[5:8]])
        poses.append(
            CameraPose(q, t, image_path=" ".join(parts[9:]), camera_id=int(parts[8]), image_id=int(parts[0]))
        )
        i += 2
    return poses


def parse_points(text: str) -> tuple[np.ndarray, np.ndarray]:
    xyz, rgb = [], []
    for _, line in _data_lines(text):
        parts = line.split()
        xyz.append([float(v) for v in parts[1:4]])
        rgb.append([int(v) for v in parts[4:7]])
    if not xyz:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.array(xyz), np.array(rgb, dtype=np.float64) / 255.0


def parse_colmap(cameras_text: str, images_text: str, points_text: str):
    """Parse a COLMAP text export.

    Returns ``(cameras, poses, points, colors)`` where ``cameras`` maps camera
    id to intrinsics, ``poses`` keeps file order, and colors are in [0, 1].
    """
    cameras = parse_cameras(cameras_text)
    poses = parse_images(images_text)
    for p in poses:
        if p.camera_id not in cameras:
            raise FormatError(f"image {p.image_path!r} references unknown camera {p.camera_id}")
    points, colors = parse_points(points_text)
    return cameras, poses, points, colors


def format_cameras(cameras: dict[int, CameraIntrinsics]) -> str:
    out = ["# Camera list with one line of data per camera:", "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cid, K in cameras.items():
        if K.fx == K.fy:
            out.append(f"{cid} SIMPLE_PINHOLE {K.width} {K.height} {K.fx!r} {K.cx!r} {K.cy!r}")
        else:
            out.append(f"{cid} PINHOLE {K.width} {K.height} {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}")
    return "\n".join(out) + "\n"


def format_images(poses: list[CameraPose]) -> str:
    out = ["# Image list with two lines of data per image:",
           "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
           "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for k, p in enumerate(poses):
        q = " ".join(repr(float(v)) for v in p.rotation)
        t = " ".join(repr(float(v)) for v in p.translation)
        out.append(f"{p.image_id or k + 1} {q} {t} {p.camera_id} {p.image_path}")
        out.append("")
    return "\n".join(out) + "\n"


def format_points(points: np.ndarray, colors: np.ndarray) -> str:
    out = ["# 3D point list with one line of data per point:",
           "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    rgb = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(int)
    for k, (p, c) in enumerate(zip(points, rgb)):
        out.append(f"{k + 1} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]} 0.0")
    return "\n".join(out) + "\n"


def write_colmap(directory: str | Path, cameras, poses, points, colors) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "cameras.txt").write_text(format_cameras(cameras))
    (d / "images.txt").write_text(format_images(poses))
    (d / "points3D.txt").write_text(format_points(points, colors))


# --------------------------------------------------------------------------
# images, masks, float maps

def read_image(path: str | Path, keep_alpha: bool = False) -> np.ndarray:
    """8-bit PNG/PPM as float64 in [0, 1]; RGB, or RGBA when ``keep_alpha`` and the file has alpha."""
    with Image.open(path) as im:
        mode = "RGBA" if keep_alpha and ("A" in im.getbands() or "transparency" in im.info) else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float64)
    return arr / 255.0


def write_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr != 0).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255).save(path)


def read_entity_map(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.int32)


def write_entity_map(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("entity labels must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def write_float_map(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC + struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_float_map(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MAP_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    w, h = struct.unpack("<II", data[8:16])
    payload = np.frombuffer(data[16:], dtype="<f4")
    if payload.size % (w * h):
        raise FormatError(f"{path}: payload of {payload.size} floats does not tile {w}x{h}")
    ch = payload.size // (w * h)
    arr = payload.reshape(h, w, ch).astype(np.float64)
    return arr[..., 0] if ch == 1 else arr


# --------------------------------------------------------------------------
# manifest

@dataclass
class Manifest:
    colmap_dir: str = "sparse"
    image_dir: str = "images"
    sam_dir: str = "masks/sam"
    entity_dir: str = "masks/entity"
    sequences: dict[str, int] = field(default_factory=dict)
    holdout: set[str] = field(default_factory=set)
    eval_masks: dict[str, str] = field(default_factory=dict)


def parse_manifest(text: str) -> Manifest:
    """Parse a manifest.

    Example::

        [dataset]
        colmap = sparse
        images = images
        sam_masks = masks/sam
        entity_maps = masks/entity

        [sequences]
        frame_000.png = 0
        frame_001.png = 1

        [holdout]
        frame_001.png

        [eval_masks]
        frame_001.png = masks/eval/frame_001.png
    """
    cp = configparser.ConfigParser(delimiters=("=",), allow_no_value=True, interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    m = Manifest()
    if cp.has_section("dataset"):
        d = cp["dataset"]
        m.colmap_dir = d.get("colmap", m.colmap_dir)
        m.image_dir = d.get("images", m.image_dir)
        m.sam_dir = d.get("sam_masks", m.sam_dir)
        m.entity_dir = d.get("entity_maps", m.entity_dir)
    if not cp.has_section("sequences"):
        raise FormatError("manifest has no [sequences] section")
    for name, value in cp["sequences"].items():
        try:
            m.sequences[name] = int(value)
        except (TypeError, ValueError):
            raise FormatError(f"manifest: sequence id for {name!r} is not an integer: {value!r}") from None
        if m.sequences[name] < 0:
            raise FormatError(f"manifest: negative sequence id for {name!r}")
    if cp.has_section("holdout"):
        m.holdout = set(cp["holdout"].keys())
    if cp.has_section("eval_masks"):
        m.eval_masks = dict(cp["eval_masks"].items())
    return m


def format_manifest(m: Manifest) -> str:
    lines = ["[dataset]", f"colmap = {m.colmap_dir}", f"images = {m.image_dir}",
             f"sam_masks = {m.sam_dir}", f"entity_maps = {m.entity_dir}", "", "[sequences]"]
    lines += [f"{k} = {v}" for k, v in m.sequences.items()]
    if m.holdout:
        lines += ["", "[holdout]"] + sorted(m.holdout)
    if m.eval_masks:
        lines += ["", "[eval_masks]"] + [f"{k} = {v}" for k, v in m.eval_masks.items()]
    return "\n".join(lines) + "\n"


def _find_mask(directory: Path, image_name: str) -> Path | None:
    p = directory / (Path(image_name).stem + ".png")
    return p if p.exists() else None


def load_dataset(root_dir: str | Path, manifest: Manifest | str | Path | None = None) -> MultiSequenceDataset:
    """Load images, masks and COLMAP reconstruction under ``root_dir``.

    ``manifest`` may be a parsed :class:`Manifest`, a path to one, or None
    for ``root_dir/manifest.ini``. Images absent from the manifest are skipped.
    """
    root = Path(root_dir)
    if manifest is None:
        manifest = root / "manifest.ini"
    if not isinstance(manifest, Manifest):
        manifest = parse_manifest(Path(manifest).read_text())
    sparse = root / manifest.colmap_dir
    cameras, poses, points, colors = parse_colmap(
        (sparse / "cameras.txt").read_text(),
        (sparse / "images.txt").read_text(),
        (sparse / "points3D.txt").read_text(),
    )
    by_name = {p.image_path: p for p in poses}
    frames = []
    for name, seq in manifest.sequences.items():
        if name not in by_name:
            raise FormatError(f"manifest image {name!r} is not in images.txt")
        pose = by_name[name]
        pose.sequence_id = seq
        img_path = root / manifest.image_dir / name
        image = read_image(img_path)
        h, w = image.shape[:2]
        K = cameras[pose.camera_id]
        if (K.width, K.height) != (w, h):
            raise FormatError(f"{img_path}: size {w}x{h} does not match camera {pose.camera_id} ({K.width}x{K.height})")
        sam_path = _find_mask(root / manifest.sam_dir, name)
        ent_path = _find_mask(root / manifest.entity_dir, name)
        sam = read_mask(sam_path) if sam_path else np.zeros((h, w), np.uint8)
        ent = read_entity_map(ent_path) if ent_path else np.zeros((h, w), np.int32)
        for mpath, arr in ((sam_path, sam), (ent_path, ent)):
            if mpath is not None and arr.shape != (h, w):
                raise FormatError(f"mask {mpath} has shape {arr.shape} but image {img_path} is {(h, w)}")
        eval_mask = None
        if name in manifest.eval_masks:
            eval_mask = read_mask(root / manifest.eval_masks[name])
            if eval_mask.shape != (h, w):
                raise FormatError(f"mask {manifest.eval_masks[name]} has shape {eval_mask.shape} but image {img_path} is {(h, w)}")
        frames.append(Frame(pose, image, MaskSet(sam, ent), holdout=name in manifest.holdout, eval_mask=eval_mask))
    n = max(manifest.sequences.values()) + 1 if manifest.sequences else 0
    return MultiSequenceDataset(cameras, frames, points, colors, num_sequences=n)


def save_dataset(root_dir: str | Path, dataset: MultiSequenceDataset, image_ext: str = ".png") -> Manifest:
    """Write a dataset in the layout read by :func:`load_dataset`."""
    root = Path(root_dir)
    m = Manifest()
    for sub in (m.image_dir, m.sam_dir, m.entity_dir):
        (root / sub).mkdir(parents=True, exist_ok=True)
    poses = []
    for k, f in enumerate(dataset.frames):
        name = f.pose.image_path or f"frame_{k:04d}{image_ext}"
        f.pose.image_path = name
        f.pose.image_id = k + 1
        poses.append(f.pose)
        write_image(root / m.image_dir / name, f.image)
        stem = Path(name).stem
        if f.masks.sam.any():
            write_mask(root / m.sam_dir / f"{stem}.png", f.masks.sam)
        if f.masks.entity.any():
            write_entity_map(root / m.entity_dir / f"{stem}.png", f.masks.entity)
        if f.eval_mask is not None:
            (root / "masks/eval").mkdir(parents=True, exist_ok=True)
            write_mask(root / "masks/eval" / f"{stem}.png", f.eval_mask)
            m.eval_masks[name] = f"masks/eval/{stem}.png"
        m.sequences[name] = f.sequence_id
        if f.holdout:
            m.holdout.add(name)
    write_colmap(root / m.colmap_dir, dataset.cameras, poses, dataset.points, dataset.point_colors)
    (root / "manifest.ini").write_text(format_manifest(m))
    return m
