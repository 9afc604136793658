"""Command line: generate | train | run | eval.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, fileio
from .camera import CameraIntrinsics
from .config import ConfigError, RunConfig
from .fusion import LabelVolume, evaluate, fuse_ground_truth, render_label_view
from .pipeline import (FrameSequence, orbit, random_views, read_sequence, room_spec, run_sequence,
                       score_run, training_set, write_sequence)
from .scene import VOID_ID, RoomSpec, generate_room
from .segnet import AutoencoderStack, train_stack

logger = logging.getLogger("semfuse")

# chair, table, floor, ceiling, wall; void is black
PALETTE = np.array([
    [230, 25, 75],
    [245, 130, 48],
    [60, 180, 75],
    [70, 140, 240],
    [200, 200, 200],
], dtype=np.uint8)
VOID_COLOUR = np.array([0, 0, 0], dtype=np.uint8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def colourise(labels: np.ndarray) -> np.ndarray:
    out = np.empty(labels.shape + (3,), np.uint8)
    out[:] = VOID_COLOUR
    known = labels < len(PALETTE)
    out[known] = PALETTE[labels[known]]
    return out


def write_png(path, labels: np.ndarray) -> None:
    from PIL import Image
    # fixed encoder settings keep files byte-identical across runs
    Image.fromarray(colourise(labels), "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def versions() -> dict:
    import numba
    import PIL
    return {
        "semfuse": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "pillow": PIL.__version__,
    }


def _describe(out: Path, cfg: RunConfig, metrics: dict | None = None) -> None:
    cfg.save(out / "config.txt")
    (out / "versions.json").write_text(json.dumps(versions(), indent=2, sort_keys=True) + "\n")
    if metrics is not None:
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def _intrinsics(cfg: RunConfig) -> CameraIntrinsics:
    return CameraIntrinsics.default(cfg.image_width, cfg.image_height)


def _room(cfg: RunConfig):
    base = room_spec(cfg.seed, cfg.room_width, cfg.room_depth, cfg.room_height)
    return RoomSpec(base.width, base.depth, base.height,
                    n_chairs=cfg.n_chairs if cfg.n_chairs >= 0 else base.n_chairs,
                    n_tables=cfg.n_tables if cfg.n_tables >= 0 else base.n_tables,
                    seed=cfg.seed, tessellation=cfg.tessellation)


# -- commands -------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out: Path) -> dict:
    scene = generate_room(_room(cfg))
    if cfg.trajectory == "orbit":
        poses = orbit(scene, cfg.n_frames)
    else:
        poses = random_views(scene, cfg.n_frames, cfg.seed)
    write_sequence(out, scene, poses, _intrinsics(cfg))
    info = {"frames": len(poses), "triangles": scene.n_triangles, "seed": cfg.seed}
    _describe(out, cfg, info)
    return info


def cmd_train(cfg: RunConfig, out: Path, datasets: list[str], resume_from: int = 1,
              weights: str | None = None) -> dict:
    if not datasets:
        raise UsageError("train needs at least one dataset directory")
    tc = cfg.train_config()
    stack = None
    if resume_from > 1:
        if weights is None:
            raise UsageError("--resume-from-layer needs --weights")
        stack = AutoencoderStack.load(weights)
        if stack.config != tc:
            raise ConfigError("weights were trained with a different network configuration")
    if not 1 <= resume_from <= tc.layers:
        raise UsageError(f"--resume-from-layer must be in 1..{tc.layers}")
    seqs = [read_sequence(d) for d in datasets]
    stack, reports = train_stack(tc, training_set(seqs), resume_from - 1, stack)
    stack.save(out / "weights.bin")
    report = {"layers": [{"layer": r.layer, "train_accuracy": r.train_accuracy,
                          "initial_loss": r.initial_loss, "final_loss": r.final_loss,
                          "loss_history": r.loss_history} for r in reports]}
    _describe(out, cfg, report)
    return report


def cmd_run(cfg: RunConfig, out: Path, sequence: str, weights: str) -> dict:
    seq = read_sequence(sequence)
    stack = AutoencoderStack.load(weights)
    res = run_sequence(seq, stack, cfg.pose_source, cfg.grid_dims)
    res.volume.save(out / "tsdf.vol")
    res.labels.save(out / "labels.lvol")
    views = out / "views"
    preds = out / "predictions"
    views.mkdir(exist_ok=True)
    preds.mkdir(exist_ok=True)
    vox = res.labels.extract_labels()
    for i, pose in enumerate(res.poses):
        fileio.write_pgm(fileio.frame_paths(views, i)["label"],
                         render_label_view(res.labels, res.volume, seq.intrinsics, pose, vox))
        fileio.write_pgm(fileio.frame_paths(preds, i)["label"], res.frame_predictions[i])
        fileio.write_pose(fileio.frame_paths(views, i)["pose"], pose, seq.intrinsics)
    metrics: dict = {"frames_processed": len(res.poses), "pose_source": cfg.pose_source,
                     "gravity_up": res.gravity.up.tolist(), "floor_level": res.gravity.floor_level,
                     "tracking_lost_at": res.tracking_lost_at}
    if seq.scene is not None and all(l is not None for l in seq.labels):
        m = score_run(res, seq)
        metrics.update(m.to_dict())
        gt = fuse_ground_truth(seq.scene, seq.poses[: len(res.poses)], seq.intrinsics, res.labels)
        gt.save(out / "ground_truth.lvol")
    _describe(out, cfg, metrics)
    if res.tracking_lost_at is not None:
        raise RuntimeError(f"tracking lost at frame {res.tracking_lost_at}; partial outputs written")
    return metrics


def _load_labels(path: Path) -> dict[int, np.ndarray] | np.ndarray:
    if path.is_dir():
        idx = fileio.list_frames(path)
        frames = {i: fileio.read_pgm(fileio.frame_paths(path, i)["label"]) for i in idx
                  if fileio.frame_paths(path, i)["label"].exists()}
        if not frames:
            raise FileNotFoundError(f"no label images in {path}")
        return frames
    if not path.exists():
        raise FileNotFoundError(f"no such file {path}")
    return LabelVolume.load(path).extract_labels()


def cmd_eval(cfg: RunConfig, out: Path, predicted: str, truth: str) -> dict:
    pred = _load_labels(Path(predicted))
    gt = _load_labels(Path(truth))
    K = cfg.classes
    if isinstance(pred, dict) != isinstance(gt, dict):
        raise ValueError("predicted and ground truth must both be label-image directories or both volumes")
    if isinstance(pred, dict):
        common = sorted(set(pred) & set(gt))
        if not common:
            raise ValueError("no frame indices in common")
        m = evaluate(np.stack([pred[i] for i in common]), np.stack([gt[i] for i in common]), K)
        img = out / "images"
        img.mkdir(exist_ok=True)
        for i in common:
            write_png(img / f"frame_{i:05d}.pred.png", pred[i])
            write_png(img / f"frame_{i:05d}.gt.png", gt[i])
            err = np.where((pred[i] != gt[i]) & (gt[i] != VOID_ID) & (pred[i] != VOID_ID), 1, 0)
            fileio.write_pgm(img / f"frame_{i:05d}.error.pgm", (err * 255).astype(np.uint8))
    else:
        m = evaluate(pred, gt, K)
    metrics = m.to_dict()
    metrics["palette"] = {str(c): PALETTE[c].tolist() for c in range(len(PALETTE))}
    _describe(out, cfg, metrics)
    return metrics


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("generate", help="render a procedural room sequence")
    common(g)
    t = sub.add_parser("train", help="train the network layer by layer")
    common(t)
    t.add_argument("datasets", nargs="+", help="sequence directories written by generate")
    t.add_argument("--resume-from-layer", type=int, default=1)
    t.add_argument("--weights", help="weights holding the already trained layers")
    r = sub.add_parser("run", help="reconstruct, segment and fuse a sequence")
    common(r)
    r.add_argument("sequence")
    r.add_argument("--weights", required=True)
    r.add_argument("--poses", choices=("gt", "icp"), help="pose source (overrides the config)")
    e = sub.add_parser("eval", help="score label images or volumes against ground truth")
    common(e)
    e.add_argument("predicted", help="label volume file or directory of label images")
    e.add_argument("truth", help="label volume file or directory of label images")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.with_seed(args.seed)
        if getattr(args, "poses", None):
            from dataclasses import replace
            cfg = replace(cfg, pose_source=args.poses)
    except (UsageError, ConfigError) as e:
        print(f"semfuse: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"semfuse: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.datasets, args.resume_from_layer, args.weights)
        elif args.command == "run":
            cmd_run(cfg, out, args.sequence, args.weights)
        else:
            cmd_eval(cfg, out, args.predicted, args.truth)
    except (UsageError, ConfigError) as e:
        print(f"semfuse: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        logger.debug("failure", exc_info=True)
        print(f"semfuse: {args.command} failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
