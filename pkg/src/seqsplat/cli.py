"""Command-line front end.

Every subcommand reads an optional ``--config`` file (``key = value`` lines
under section headers) and then applies ``key=value`` overrides given on
the command line; ``section.key=value`` targets another section. The merged
configuration is written to ``config.ini`` in the output directory, so a
run can be repeated from that file alone.

Sections: ``[io]`` holds input paths (the ``--data`` style flags write
there), ``[train]`` holds training options, and ``[render]``, ``[mesh]``,
``[refine]``, ``[trajectory]``, ``[composite]``, ``[camera]`` hold the
options of the matching subcommands.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen, meshing
from .config import apply_overrides, fill_dataclass, format_dataclass, read_config
from .mask_refine import refine_masks
from .metrics import EvalReport
from .scene_io import (CameraIntrinsics, load_dataset, read_entity_map, read_float_map, read_image, read_mask,
                       write_float_map, write_image, write_mask)
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train, write_loss_log

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RenderOptions:
    sequence_id: int = -1  # -1: each pose's own sequence
    write_maps: bool = True


@dataclass(frozen=True)
class MeshOptions:
    max_dim: int = 128
    truncation_voxels: float = 4.0
    pad: float = 0.05
    alpha_min: float = 0.5


@dataclass(frozen=True)
class RefineOptions:
    rho1_pct: float = 70.0
    rho2_pct: float = 80.0
    dilation_px: int = 3
    drop_large_sam: bool = False


@dataclass(frozen=True)
class TrajectoryOptions:
    kind: str = "orbit"
    frames: int = 36
    seed: int = 0
    base_t: tuple = (0.0, 0.0, 2.0)
    base_r: tuple = (0.0, 0.0, 0.0)
    noise_sigma_t: tuple = (0.0, 0.0, 0.0)
    noise_sigma_r: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (1.0, 0.0, 0.0)
    span: float = 1.0
    yaw_range: tuple = (0.0, 2 * np.pi)
    orbit_radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    z_range: tuple = (1.0, 2.0)


@dataclass(frozen=True)
class CompositeOptions:
    blur_sigma: float = 0.0
    premultiplied: bool = False
    blur_alpha: bool = False


@dataclass(frozen=True)
class CameraOptions:
    fx: float = 70.4
    fy: float = 70.4
    cx: float = 31.5
    cy: float = 31.5
    width: int = 64
    height: int = 64


SECTIONS = {"train": TrainConfig, "render": RenderOptions, "mesh": MeshOptions, "refine": RefineOptions,
            "trajectory": TrajectoryOptions, "composite": CompositeOptions, "camera": CameraOptions}


def _options(cp: configparser.ConfigParser, name: str):
    default = SECTIONS[name]()
    if not cp.has_section(name):
        return default
    try:
        return fill_dataclass(default, cp[name])
    except KeyError as e:
        raise UsageError(f"[{name}] {e.args[0]}") from None
    except ValueError as e:
        raise UsageError(f"[{name}] {e}") from None


def _io(cp, key: str, required: bool = True, must_exist: bool = True) -> Path | None:
    value = cp.get("io", key, fallback=None)
    if value is None:
        if required:
            raise UsageError(f"missing input: {key} (pass --{key.replace('_', '-')} or io.{key}=...)")
        return None
    p = Path(value)
    if must_exist and not p.exists():
        raise UsageError(f"input path does not exist: {p}")
    return p


def _echo(cp: configparser.ConfigParser, out: Path, used: list[str]) -> None:
    for name in used:
        if name in SECTIONS:
            opts = _options(cp, name)
            if cp.has_section(name):
                cp.remove_section(name)
            cp.read_string(format_dataclass(opts, name))
    with open(out / "config.ini", "w") as fh:
        cp.write(fh)


def _images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".ppm"))


# --------------------------------------------------------------------------
# subcommands

def cmd_train(cp, out: Path) -> None:
    cfg = _options(cp, "train")
    data = _io(cp, "data")
    ds = load_dataset(data)
    model = train(ds, cfg, log_every=cp.getint("io", "log_every", fallback=0))
    save_checkpoint(out / "model.ckpt", model)
    write_loss_log(out / "loss_log.csv", model.loss_log)
    if model.refined_masks:
        (out / "refined_masks").mkdir(exist_ok=True)
        for name, m in model.refined_masks.items():
            write_mask(out / "refined_masks" / (Path(name).stem + ".png"), m)
    if ds.test_frames:
        (out / "eval.csv").write_text(evaluate(model, ds).to_csv())
    _echo(cp, out, ["train"])


def _poses_and_camera(cp):
    traj = _io(cp, "trajectory", required=False)
    data = _io(cp, "data", required=traj is None)
    ds = load_dataset(data) if data is not None else None
    if traj is not None:
        poses = datagen.poses_from_jsonl(traj.read_text())
    else:
        poses = [f.pose for f in ds.frames]
    if ds is not None and not cp.has_section("camera"):
        K = next(iter(ds.cameras.values()))
    else:
        c = _options(cp, "camera")
        K = CameraIntrinsics(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    return poses, K, ds


def cmd_render(cp, out: Path) -> None:
    opts = _options(cp, "render")
    model = load_checkpoint(_io(cp, "checkpoint"))
    poses, K, ds = _poses_and_camera(cp)
    n_seq = model.appearance.num_sequences
    if opts.sequence_id >= n_seq and not model.config.shared_embedding:
        raise UsageError(f"sequence id {opts.sequence_id} outside [0, {n_seq})")
    for k, pose in enumerate(poses):
        sid = pose.sequence_id if opts.sequence_id < 0 else opts.sequence_id
        if ds is not None:
            K = ds.cameras.get(pose.camera_id, K)
        r = model.render(pose, K, sid)
        stem = Path(pose.image_path).stem or f"frame_{k:05d}"
        write_image(out / f"{stem}.png", r.image())
        if opts.write_maps:
            write_float_map(out / f"{stem}.depth.raw", np.where(r.depth_valid, r.depth, 0.0))
            write_float_map(out / f"{stem}.normal.raw", r.normal)
            write_float_map(out / f"{stem}.distance.raw", r.distance)
    _echo(cp, out, ["render"])


def cmd_refine_masks(cp, out: Path) -> None:
    opts = _options(cp, "refine")
    sam_dir, ent_dir, err_dir = _io(cp, "sam_dir"), _io(cp, "entity_dir"), _io(cp, "error_dir")
    for sam_path in _images(sam_dir):
        stem = sam_path.stem
        ent_path = ent_dir / f"{stem}.png"
        err_path = err_dir / f"{stem}.raw"
        if not ent_path.exists() or not err_path.exists():
            raise UsageError(f"no entity map or error map for {sam_path.name}")
        sam, ent = read_mask(sam_path), read_entity_map(ent_path)
        err = read_float_map(err_path)
        if err.ndim == 3:
            err = err[..., 0]
        refined = refine_masks(sam, ent, err, opts.rho1_pct, opts.rho2_pct, opts.dilation_px,
                               drop_large_sam=opts.drop_large_sam)
        write_mask(out / f"{stem}.png", refined)
    _echo(cp, out, ["refine"])


def cmd_extract_mesh(cp, out: Path) -> None:
    opts = _options(cp, "mesh")
    model = load_checkpoint(_io(cp, "checkpoint"))
    poses, K, ds = _poses_and_camera(cp)
    depths, valids = [], []
    for pose in poses:
        r = model.render(pose, K)
        depths.append(r.depth)
        valids.append(r.depth_valid & (r.alpha >= opts.alpha_min))
    depths = [np.where(v, d, 0.0) for d, v in zip(depths, valids)]
    lo, hi = meshing.fit_bounds(depths, poses, K, pad=opts.pad)
    vol = meshing.TSDFVolume.from_bounds(lo, hi, opts.max_dim, opts.truncation_voxels)
    for d, v, pose in zip(depths, valids, poses):
        meshing.tsdf_integrate(vol, d, pose, K, v)
    mesh = meshing.extract_mesh(vol)
    meshing.write_obj(out / "mesh.obj", mesh)
    _echo(cp, out, ["mesh"])


def cmd_gen_trajectory(cp, out: Path) -> None:
    o = _options(cp, "trajectory")
    try:
        spec = datagen.TrajectorySpec(o.kind, o.frames, o.base_t, o.base_r, o.noise_sigma_t, o.noise_sigma_r,
                                      o.direction, o.span, tuple(o.yaw_range), o.orbit_radius, o.center,
                                      tuple(o.z_range))
    except ValueError as e:
        raise UsageError(str(e)) from None
    poses = datagen.gen_trajectory(spec, o.seed)
    (out / "poses.jsonl").write_text(datagen.poses_to_jsonl(poses))
    _echo(cp, out, ["trajectory"])


def cmd_composite(cp, out: Path) -> None:
    o = _options(cp, "composite")
    bg_dir, fg_dir = _io(cp, "bg_dir"), _io(cp, "fg_dir")
    for bg_path in _images(bg_dir):
        fg_path = fg_dir / f"{bg_path.stem}.png"
        if not fg_path.exists():
            raise UsageError(f"no foreground layer for {bg_path.name}")
        bg = read_image(bg_path)
        fg = read_image(fg_path, keep_alpha=True)
        if fg.shape[2] != 4:
            raise UsageError(f"{fg_path.name} has no alpha channel")
        img = datagen.composite(datagen.CompositeJob(fg, bg[..., :3], o.blur_sigma, o.premultiplied, o.blur_alpha))
        write_image(out / f"{bg_path.stem}.png", img)
        boxes = fg_dir / f"{bg_path.stem}.txt"
        (out / f"{bg_path.stem}.txt").write_text(boxes.read_text() if boxes.exists() else "")
    _echo(cp, out, ["composite"])


def cmd_eval(cp, out: Path) -> None:
    renders, gt = _io(cp, "renders"), _io(cp, "gt")
    masks = _io(cp, "masks", required=False)
    if cp.getboolean("io", "lpips", fallback=False):
        print("notice: LPIPS is not computed; it needs a pretrained network", file=sys.stderr)
    rep = EvalReport()
    for gt_path in _images(gt):
        r_path = renders / f"{gt_path.stem}.png"
        if not r_path.exists():
            raise UsageError(f"no render for {gt_path.name}")
        mask = None
        if masks is not None and (masks / f"{gt_path.stem}.png").exists():
            mask = read_mask(masks / f"{gt_path.stem}.png")
        a, b = read_image(r_path)[..., :3], read_image(gt_path)[..., :3]
        rep.add(gt_path.stem, 0, a, b, mask)
    (out / "eval.csv").write_text(rep.to_csv())
    _echo(cp, out, [])


COMMANDS = {
    "train": (cmd_train, "train", ["data"]),
    "render": (cmd_render, "render", ["checkpoint", "data", "trajectory"]),
    "refine-masks": (cmd_refine_masks, "refine", ["sam_dir", "entity_dir", "error_dir"]),
    "extract-mesh": (cmd_extract_mesh, "mesh", ["checkpoint", "data", "trajectory"]),
    "gen-trajectory": (cmd_gen_trajectory, "trajectory", []),
    "composite": (cmd_composite, "composite", ["bg_dir", "fg_dir"]),
    "eval": (cmd_eval, "eval", ["renders", "gt", "masks"]),
}


def _defaults_text(section: str) -> str:
    cls = SECTIONS.get(section)
    return "" if cls is None else "defaults:\n" + format_dataclass(cls(), section)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqsplat", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, section, io_keys) in COMMANDS.items():
        sp = sub.add_parser(name, epilog=_defaults_text(section),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="config file (key = value with [section] headers)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")
        for k in io_keys:
            sp.add_argument("--" + k.replace("_", "-"), dest="io_" + k)
        if name == "render":
            sp.add_argument("--sequence-id", type=int, help="render every pose with this sequence's embedding")
        if name == "train":
            sp.add_argument("--log-every", type=int, dest="io_log_every")
        if name == "eval":
            sp.add_argument("--lpips", action="store_true", help="request LPIPS (prints a notice; not computed)")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func, section, _ = COMMANDS[args.command]
    try:
        if args.threads:
            import numba  # noqa: PLC0415
            numba.set_num_threads(args.threads)
        cp = read_config(args.config)
        if not cp.has_section("io"):
            cp.add_section("io")
        for k, v in vars(args).items():
            if k.startswith("io_") and v is not None:
                cp["io"][k[3:]] = str(v)
        if getattr(args, "lpips", False):
            cp["io"]["lpips"] = "true"
        try:
            apply_overrides(cp, args.overrides, section)
        except ValueError as e:
            raise UsageError(str(e)) from None
        unknown = [n for n in cp.sections() if n not in SECTIONS and n not in ("io", "eval")]
        if unknown:
            raise UsageError(f"unknown config section(s): {', '.join(unknown)}")
        if getattr(args, "sequence_id", None) is not None:
            apply_overrides(cp, [f"render.sequence_id={args.sequence_id}"], section)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        func(cp, out)
    except (UsageError, FileNotFoundError) as e:
        print(f"seqsplat: error: usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, configparser.Error) as e:
        print(f"seqsplat: error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return EXIT_FAILURE
    except RuntimeError as e:
        print(f"seqsplat: error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
