"""Command-line entry point: ``egofusion {train,infer,eval,synth,plot}``.

Configuration files hold one ``key = value`` per line with section
prefixes (``train.lr_initial = 1e-4``); ``#`` starts a comment. Exit codes:
0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import data, evaluation, training
from .geometry import Pose6D, pose6d_to_se3
from .losses import LossWeights
from .networks import DepthNetConfig, EgoMotionModel, FusionStrategy, PoseNetConfig
from .tensor import NonFiniteError, Tensor, no_grad, ops, set_default_dtype, set_deterministic

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("egofusion")


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------

def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _optional_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


def _optional_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _motion(text):
    """Semicolon-separated 6-vectors ``rx ry rz tx ty tz``."""
    out = []
    for chunk in text.split(";"):
        vals = [float(x) for x in chunk.replace(",", " ").split()]
        if len(vals) != 6:
            raise ValueError(f"motion entries need 6 numbers, got {len(vals)}")
        out.append(Pose6D.from_vector(vals))
    if not out:
        raise ValueError("empty motion script")
    return out


def _box(text):
    vals = _int_list(text)
    if len(vals) != 4:
        raise ValueError("saturation box needs x0 y0 x1 y1")
    return vals


SCHEMA = {
    "seed": int,
    "run_dir": str,
    "deterministic": _bool,
    "fp64": _bool,
    "data.root": str,
    "data.sequence": str,
    "data.height": int,
    "data.width": int,
    "model.strategy": FusionStrategy.parse,
    "model.pose_widths": _int_list,
    "model.pose_blocks": _int_list,
    "model.ce_threshold": float,
    "model.regressor_hidden": _int_list,
    "model.output_scale": float,
    "model.normalize_depth": _bool,
    "model.depth_encoder": _int_list,
    "model.depth_decoder": _int_list,
    "model.min_depth": float,
    "model.max_depth": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.lr_initial": float,
    "train.lr_after": float,
    "train.lr_switch_epoch": int,
    "train.beta1": float,
    "train.beta2": float,
    "train.eps": float,
    "train.max_steps": _optional_int,
    "train.checkpoint_every": int,
    "train.joint_mean": _bool,
    "loss.lambda1": float,
    "loss.lambda2": float,
    "loss.lambda3": float,
    "loss.alpha": float,
    "loss.ssim_weight": float,
    "synth.width": int,
    "synth.height": int,
    "synth.num_frames": int,
    "synth.fx": _optional_float,
    "synth.fy": _optional_float,
    "synth.motion": _motion,
    "synth.saturation": _box,
    "synth.min_depth": float,
    "synth.max_depth": float,
}


@dataclasses.dataclass
class RunConfig:
    values: dict
    source: Path | None = None

    @classmethod
    def parse(cls, text, source=None):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = SCHEMA[key](val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: invalid value for {key}: {exc}") from None
        return cls(values, source)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        return cls.parse(path.read_text(), path)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def section(self, prefix):
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    @property
    def seed(self):
        return self.get("seed", 0)

    def resolution(self):
        h, w = self.get("data.height", 64), self.get("data.width", 192)
        if h % 16 or w % 16 or h <= 0 or w <= 0:
            raise ConfigError(f"data.height/data.width ({h}x{w}) must be positive multiples of 16")
        return h, w

    def model_configs(self):
        m = self.section("model")
        try:
            depth = DepthNetConfig(
                encoder_channels=m.get("depth_encoder", DepthNetConfig.encoder_channels),
                decoder_channels=m.get("depth_decoder", DepthNetConfig.decoder_channels),
                min_depth=m.get("min_depth", DepthNetConfig.min_depth),
                max_depth=m.get("max_depth", DepthNetConfig.max_depth))
            pose = PoseNetConfig(
                strategy=m.get("strategy", FusionStrategy.MULTI_LAYER_CE),
                widths=m.get("pose_widths", PoseNetConfig.widths),
                blocks=m.get("pose_blocks", PoseNetConfig.blocks),
                ce_threshold=m.get("ce_threshold", PoseNetConfig.ce_threshold),
                regressor_hidden=m.get("regressor_hidden", PoseNetConfig.regressor_hidden),
                output_scale=m.get("output_scale", PoseNetConfig.output_scale),
                normalize_depth=m.get("normalize_depth", PoseNetConfig.normalize_depth))
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        return depth, pose

    def train_config(self, deterministic=False):
        try:
            weights = LossWeights(**self.section("loss"))
            return training.TrainConfig(seed=self.seed, deterministic=deterministic or self.get("deterministic", False),
                                        weights=weights, **self.section("train"))
        except ValueError as exc:
            raise ConfigError(f"train/loss: {exc}") from None

    def synth_spec(self):
        s = self.section("synth")
        try:
            return data.SyntheticSceneSpec(seed=self.seed, **s)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth: {exc}") from None

    def data_root(self):
        root = self.get("data.root")
        if root is None:
            raise ConfigError("data.root is required")
        path = Path(root)
        if not path.is_absolute() and self.source is not None:
            path = self.source.parent / path
        if not path.exists():
            raise ConfigError(f"data.root {path} does not exist")
        return path


# -- output directories -------------------------------------------------------

def _prepare_output(path: Path, overwrite: bool, is_dir=True):
    if path.exists():
        if not overwrite:
            raise UsageError(f"{path} exists; pass --overwrite to replace it")
        if path.is_dir() and is_dir:
            shutil.rmtree(path)
        elif path.is_file():
            path.unlink()
    if is_dir:
        path.mkdir(parents=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)


# -- subcommands --------------------------------------------------------------

def cmd_train(args):
    cfg = RunConfig.load(args.config)
    h, w = cfg.resolution()
    dcfg, pcfg = cfg.model_configs()
    tcfg = cfg.train_config(args.deterministic)
    run_dir = Path(args.out or cfg.get("run_dir") or "runs/default")
    seq = data.load_kitti_sequence(cfg.data_root(), cfg.get("data.sequence", "00"), (h, w))
    resume = None
    if args.resume is not None:
        resume = Path(args.resume) if args.resume != "last" else run_dir / "checkpoints" / "last.npz"
        if not resume.is_file():
            raise UsageError(f"no checkpoint at {resume}")
    else:
        _prepare_output(run_dir, args.overwrite)
    (run_dir / "config.txt").write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(cfg.values.items())))
    (run_dir / "config.json").write_text(json.dumps(
        {"train": tcfg.as_dict(), "model": {"depth": dataclasses.asdict(dcfg), "pose": pcfg.as_dict()},
         "height": h, "width": w, "seed": cfg.seed}, sort_keys=True, indent=2, default=str) + "\n")
    model = EgoMotionModel(dcfg, pcfg, seed=cfg.seed)
    dataset = training.SnippetDataset(seq)
    result = training.train(model, dataset, tcfg, run_dir, resume,
                            extra_meta={"height": h, "width": w, "seed": cfg.seed})
    last = result.epochs[-1].losses if result.epochs else {}
    print(f"trained {result.steps} steps; last epoch loss {last.get('total', float('nan')):.6f}; run dir {run_dir}")
    return EXIT_OK


def _fmt(v):
    if isinstance(v, FusionStrategy):
        return v.value
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    if isinstance(v, list):
        return "; ".join(" ".join(repr(float(x)) for x in p.vector()) for p in v)
    return str(v)


def infer_sequence(model: EgoMotionModel, frames):
    """Relative poses T_t_to_t+1 for consecutive frames and per-pair timings in ms."""
    model.eval()
    rel, times = [], []
    with no_grad():
        for a, b in zip(frames, frames[1:]):
            t0 = time.perf_counter()
            ia, ib = Tensor(a[None]), Tensor(b[None])
            inv = model.depth(ops.concat([ia, ib], axis=0))[0]
            vec = model.pair_pose(ia, ib, inv[0:1], inv[1:2]).data[0]
            times.append(1e3 * (time.perf_counter() - t0))
            if not np.isfinite(vec).all():
                raise NonFiniteError("non-finite pose prediction")
            rel.append(pose6d_to_se3(Pose6D.from_vector(vec)))
    return rel, times


def cmd_infer(args):
    model, meta = training.model_from_checkpoint(args.checkpoint)
    size = (meta["height"], meta["width"])
    if args.height is not None or args.width is not None:
        req = (args.height or size[0], args.width or size[1])
        if req != size:
            raise UsageError(f"requested resolution {req[0]}x{req[1]} differs from the checkpoint's "
                             f"{size[0]}x{size[1]}")
    seq = data.load_kitti_sequence(args.sequence, args.seq_id, size)
    out = Path(args.out)
    _prepare_output(out, args.overwrite, is_dir=False)
    rel, times = infer_sequence(model, seq.frames)
    traj = evaluation.integrate_trajectory(rel, list(seq.indices))
    evaluation.write_kitti_poses(traj, out)
    if times:
        print(f"{len(traj)} poses -> {out}; per pair: mean {np.mean(times):.2f} ms, median {np.median(times):.2f} ms")
    return EXIT_OK


def cmd_eval(args):
    gt = evaluation.parse_kitti_poses(args.gt)
    pred = evaluation.parse_kitti_poses(args.pred)
    if len(gt) != len(pred):
        raise data.DataError(f"trajectory lengths differ: gt {len(gt)} vs pred {len(pred)}")
    lengths = _int_list(args.lengths) if args.lengths else evaluation.DEFAULT_LENGTHS
    report = evaluation.evaluate(gt, pred, with_scale=not args.rigid, lengths=lengths,
                                 start_step=args.start_step)
    print(report.summary())
    if args.out:
        out = Path(args.out)
        _prepare_output(out, args.overwrite, is_dir=False)
        out.write_text(report.to_csv())
    return EXIT_OK


def cmd_synth(args):
    spec = RunConfig.load(args.config).synth_spec() if args.config else data.SyntheticSceneSpec()
    out = Path(args.out)
    seq = data.generate_synthetic(spec)
    _prepare_output(out, args.overwrite)
    data.write_synthetic(seq, out, args.name)
    print(f"wrote {len(seq.frames)} frames to {out}")
    return EXIT_OK


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def render_svg(trajectories, labels, size=480, margin=60):
    """Top-down x-z plot of camera paths with a legend; byte-stable for fixed input."""
    if not trajectories:
        raise ValueError("nothing to plot")
    pts = [t.positions()[:, [0, 2]] for t in trajectories]
    if any(len(p) == 0 for p in pts):
        raise ValueError("empty trajectory")
    allp = np.vstack(pts)
    lo, hi = allp.min(0), allp.max(0)
    span = max(float((hi - lo).max()), 1e-9)
    centre = 0.5 * (lo + hi)
    inner = size - 2 * margin
    scale = inner / span

    def xy(p):
        return (margin + inner / 2 + (p[0] - centre[0]) * scale,
                margin + inner / 2 - (p[1] - centre[1]) * scale)

    legend_h = 18 * len(trajectories)
    H = size + legend_h
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{H}" viewBox="0 0 {size} {H}">',
        f'<rect x="0" y="0" width="{size}" height="{H}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" fill="none" stroke="#999999"/>',
    ]
    x0, x1 = centre[0] - span / 2, centre[0] + span / 2
    z0, z1 = centre[1] - span / 2, centre[1] + span / 2
    parts += [
        f'<text x="{margin}" y="{size - margin + 16}" font-size="11" text-anchor="start">{x0:.2f}</text>',
        f'<text x="{size - margin}" y="{size - margin + 16}" font-size="11" text-anchor="end">{x1:.2f}</text>',
        f'<text x="{size / 2:.1f}" y="{size - margin + 34}" font-size="12" text-anchor="middle">x [m]</text>',
        f'<text x="{margin - 6}" y="{size - margin}" font-size="11" text-anchor="end">{z0:.2f}</text>',
        f'<text x="{margin - 6}" y="{margin + 10}" font-size="11" text-anchor="end">{z1:.2f}</text>',
        f'<text x="{margin - 40}" y="{size / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 {margin - 40} {size / 2:.1f})">z [m]</text>',
    ]
    for i, (p, label) in enumerate(zip(pts, labels)):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join("{:.2f},{:.2f}".format(*xy(q)) for q in p)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = size + 18 * i + 4
        parts.append(f'<line x1="{margin}" y1="{ly + 6}" x2="{margin + 24}" y2="{ly + 6}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{margin + 30}" y="{ly + 10}" font-size="12">{_escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text):
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_plot(args):
    trajs = [evaluation.parse_kitti_poses(p) for p in args.trajectories]
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.trajectories]
    if len(labels) != len(trajs):
        raise UsageError("one label per trajectory required")
    out = Path(args.out)
    _prepare_output(out, args.overwrite, is_dir=False)
    out.write_text(render_svg(trajs, labels))
    print(f"plotted {len(trajs)} trajectories -> {out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for reproducible runs")
    common.add_argument("--fp64", action="store_true", help="compute in float64")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="egofusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train depth and pose networks")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory (defaults to run_dir from the config)")
    t.add_argument("--resume", nargs="?", const="last", help="checkpoint to resume from (default: last in run dir)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="predict a trajectory for a sequence")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sequence", required=True, help="sequence directory, or dataset root with --seq-id")
    i.add_argument("--seq-id")
    i.add_argument("--out", required=True, help="output pose file")
    i.add_argument("--height", type=int)
    i.add_argument("--width", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="odometry metrics of a predicted trajectory")
    e.add_argument("--gt", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", help="CSV report path")
    e.add_argument("--rigid", action="store_true", help="rigid instead of similarity alignment")
    e.add_argument("--lengths", help="segment lengths in metres, comma separated")
    e.add_argument("--start-step", type=int, default=evaluation.DEFAULT_START_STEP)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="00", help="sequence id")
    s.set_defaults(func=cmd_synth)

    pl = sub.add_parser("plot", parents=[common], help="SVG of top-down trajectories")
    pl.add_argument("trajectories", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--labels", help="comma-separated legend labels")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.getLogger("egofusion").setLevel(logging.INFO)
    if args.fp64:
        set_default_dtype(np.float64)
    if args.deterministic:
        set_deterministic(True)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DataError, evaluation.PoseFileError, training.CheckpointError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if args.fp64:
            set_default_dtype(np.float32)


if __name__ == "__main__":
    sys.exit(main())
