"""End-to-end building blocks shared by the CLI and the experiments:
dataset rendering, training-set assembly, and the reconstruct / segment /
fuse loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileio
from .camera import CameraIntrinsics, Pose, backproject_depth, look_at
from .dhac import FeatureImage, assemble_dhac
from .fusion import LabelVolume, SegMetrics, evaluate, fuse_ground_truth, render_label_view
from .gravity import GravityFrame, align_gravity
from .icp import ModelFrame, icp_track
from .render import render_frame
from .scene import VOID_ID, RoomSpec, Scene, generate_room
from .segnet import AutoencoderStack, predict
from .tsdf import TsdfVolume

logger = logging.getLogger(__name__)

GRAVITY_SAMPLES = 200_000


def room_spec(seed: int, width=4.0, depth=4.0, height=2.5) -> RoomSpec:
    """Room with a seed-dependent furniture count (1-2 tables, 2-4 chairs)."""
    rng = np.random.default_rng([seed, 7])
    return RoomSpec(width, depth, height, n_chairs=int(rng.integers(2, 5)),
                    n_tables=int(rng.integers(1, 3)), seed=seed)


def random_views(scene: Scene, n: int, seed: int) -> list[Pose]:
    """Cameras inside the room looking at random points near the furniture
    height band; deterministic in ``seed``."""
    rng = np.random.default_rng([seed, 11])
    lo, hi = np.asarray(scene.bounds, dtype=np.float64)
    centre = (lo + hi) / 2
    half = (hi - lo) / 2
    poses = []
    while len(poses) < n:
        a = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(0.45, 0.8) * min(half[0], half[2])
        eye = np.array([centre[0] + r * np.cos(a), rng.uniform(1.2, 2.0), centre[2] + r * np.sin(a)])
        target = np.array([centre[0] + rng.uniform(-0.5, 0.5) * half[0], rng.uniform(0.2, 0.9),
                           centre[2] + rng.uniform(-0.5, 0.5) * half[2]])
        f = target - eye
        if abs(f[1]) > 0.95 * np.linalg.norm(f):
            continue
        poses.append(look_at(eye, target))
    return poses


def orbit(scene: Scene, n: int, start_angle: float = 0.0, radius_frac: float = 0.6,
          height: float = 1.6, sweep: float = 2 * np.pi, target_height: float = 0.6) -> list[Pose]:
    """Smooth orbit about the room centre, looking slightly down."""
    lo, hi = np.asarray(scene.bounds, dtype=np.float64)
    c = (lo + hi) / 2
    r = radius_frac * min(hi[0] - c[0], hi[2] - c[2])
    target = np.array([c[0], target_height, c[2]])
    poses = []
    for i in range(n):
        a = start_angle + sweep * i / n
        eye = np.array([c[0] + r * np.cos(a), height, c[2] + r * np.sin(a)])
        poses.append(look_at(eye, target))
    return poses


def write_sequence(directory, scene: Scene, poses: Sequence[Pose], intrinsics: CameraIntrinsics) -> None:
    if not poses:
        raise ValueError("sequence must contain at least one frame")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    scene.save(d)
    for i, pose in enumerate(poses):
        depth, labels = render_frame(scene, intrinsics, pose)
        fileio.write_frame(d, i, depth, labels, pose, intrinsics)


@dataclass
class FrameSequence:
    scene: Scene | None
    depth: list[np.ndarray]
    labels: list[np.ndarray | None]
    poses: list[Pose]
    intrinsics: CameraIntrinsics


def read_sequence(directory) -> FrameSequence:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no sequence directory {d}")
    idx = fileio.list_frames(d)
    if not idx:
        raise ValueError(f"no frames in {d}")
    scene = Scene.load(d) if (d / "scene.obj").exists() else None
    depth, labels, poses = [], [], []
    K = None
    for i in idx:
        dep, lab, pose, intr = fileio.read_frame(d, i)
        depth.append(dep)
        labels.append(lab)
        poses.append(pose)
        K = K or intr
    if K is None:
        h, w = depth[0].shape
        K = CameraIntrinsics.default(w, h)
    return FrameSequence(scene, depth, labels, poses, K)


def training_example(depth_mm, labels, intrinsics, pose,
                     gravity: GravityFrame | None = None) -> tuple[FeatureImage, np.ndarray]:
    """Features of a rendered frame; the generator's frame is gravity aligned
    with the floor at zero, so that is the default gravity."""
    g = gravity or GravityFrame.identity()
    feat = assemble_dhac(depth_mm, intrinsics, pose, g)
    return feat, np.where(feat.mask, labels, VOID_ID).astype(np.uint8)


def training_set(sequences: Sequence[FrameSequence]) -> list[tuple[FeatureImage, np.ndarray]]:
    out = []
    for s in sequences:
        for dep, lab, pose in zip(s.depth, s.labels, s.poses):
            if lab is None:
                raise ValueError("training frames need label images")
            out.append(training_example(dep, lab, s.intrinsics, pose))
    return out


# -- reconstruction + segmentation loop --------------------------------------

@dataclass
class RunResult:
    volume: TsdfVolume
    labels: LabelVolume
    poses: list[Pose]
    gravity: GravityFrame
    frame_predictions: list[np.ndarray] = field(default_factory=list)
    tracking_lost_at: int | None = None


def reconstruct(depth: Sequence[np.ndarray], intrinsics: CameraIntrinsics, poses: Sequence[Pose],
                bounds, pose_source: str = "gt", dims: int = 128) -> tuple[TsdfVolume, list[Pose], int | None]:
    """Integrate the depth sequence. With ``pose_source='icp'`` only the first
    pose is taken as given; later ones are tracked frame-to-model. Returns the
    volume, the poses used and the index of the frame where tracking was lost
    (None if it never was)."""
    if not depth:
        raise ValueError("empty sequence")
    if pose_source not in ("gt", "icp"):
        raise ValueError(f"unknown pose source {pose_source!r}")
    from .icp import TrackingLostError
    vol = TsdfVolume.for_bounds(bounds, dims)
    used = []
    for i, dep in enumerate(depth):
        d = dep.astype(np.float64) / 1000.0 if np.issubdtype(dep.dtype, np.integer) else dep
        if pose_source == "gt" or i == 0:
            pose = poses[i]
        else:
            prev = used[-1]
            rd, rn = vol.raycast(intrinsics, prev)
            try:
                pose = icp_track(ModelFrame.from_raycast(rd, rn, intrinsics, prev), d, prev).pose
            except TrackingLostError:
                logger.error("tracking lost at frame %d", i)
                return vol, used, i
        vol.integrate(d, intrinsics, pose)
        used.append(pose)
    return vol, used, None


def estimate_gravity(volume: TsdfVolume, intrinsics: CameraIntrinsics, poses: Sequence[Pose]) -> GravityFrame:
    """Gravity and floor level from world normals and points raycast at every pose."""
    normals, points = [], []
    for pose in poses:
        d, n = volume.raycast(intrinsics, pose)
        ok = (d > 0) & (np.linalg.norm(n, axis=-1) > 0.5)
        normals.append(n[ok])
        points.append(pose.transform(backproject_depth(d, intrinsics)[ok]))
    N = np.concatenate(normals)
    P = np.concatenate(points)
    if len(N) > GRAVITY_SAMPLES:
        step = -(-len(N) // GRAVITY_SAMPLES)
        N, P = N[::step], P[::step]
    return align_gravity(N, P)


def segment_and_fuse(volume: TsdfVolume, stack: AutoencoderStack, intrinsics: CameraIntrinsics,
                     poses: Sequence[Pose], gravity: GravityFrame,
                     keep_predictions: bool = True) -> tuple[LabelVolume, list[np.ndarray]]:
    """Raycast every pose, compute DHAC from the raycast, predict and fuse."""
    labels = LabelVolume.like(volume, stack.config.classes)
    preds = []
    for pose in poses:
        d, n = volume.raycast(intrinsics, pose)
        feat = assemble_dhac(d, intrinsics, pose, gravity, normals_world=n)
        prob = predict(stack, feat)
        skipped = labels.fuse_frame(prob.probs, d, intrinsics, pose, prob.mask)
        if skipped:
            logger.debug("%d pixels outside the label grid", skipped)
        if keep_predictions:
            preds.append(prob.argmax())
    return labels, preds


def run_sequence(seq: FrameSequence, stack: AutoencoderStack, pose_source: str = "gt",
                 dims: int = 128) -> RunResult:
    bounds = seq.scene.bounds if seq.scene is not None else _bounds_from_depth(seq)
    vol, used, lost = reconstruct(seq.depth, seq.intrinsics, seq.poses, bounds, pose_source, dims)
    gravity = estimate_gravity(vol, seq.intrinsics, used)
    labels, preds = segment_and_fuse(vol, stack, seq.intrinsics, used, gravity)
    return RunResult(vol, labels, used, gravity, preds, lost)


def _bounds_from_depth(seq: FrameSequence) -> np.ndarray:
    pts = []
    for dep, pose in zip(seq.depth, seq.poses):
        d = dep.astype(np.float64) / 1000.0
        pts.append(pose.transform(backproject_depth(d, seq.intrinsics)[d > 0]))
    P = np.concatenate(pts)
    return np.stack([P.min(axis=0), P.max(axis=0)])


@dataclass
class RunMetrics:
    frame: list[SegMetrics]
    frame_mean_accuracy: float
    fused_frame: list[SegMetrics]
    fused_frame_mean_accuracy: float
    voxel: SegMetrics

    def to_dict(self) -> dict:
        return {
            "frame_mean_accuracy": self.frame_mean_accuracy,
            "fused_frame_mean_accuracy": self.fused_frame_mean_accuracy,
            "voxel": self.voxel.to_dict(),
            "frames": [m.to_dict() for m in self.frame],
            "fused_frames": [m.to_dict() for m in self.fused_frame],
        }


def score_run(result: RunResult, seq: FrameSequence) -> RunMetrics:
    """Per-frame predictions and re-rendered fused labels against the
    rendered ground truth; fused voxels against the ground-truth volume."""
    if seq.scene is None:
        raise ValueError("scoring needs the sequence's scene")
    K = result.labels.n_classes
    K_in = seq.intrinsics
    frame, fused = [], []
    voxel_lab = result.labels.extract_labels()
    for i, pose in enumerate(result.poses):
        _, gt = render_frame(seq.scene, K_in, seq.poses[i])
        frame.append(evaluate(result.frame_predictions[i], gt, K))
        fused.append(evaluate(render_label_view(result.labels, result.volume, K_in, pose, voxel_lab), gt, K))
    gt_vol = fuse_ground_truth(seq.scene, seq.poses[: len(result.poses)], K_in, result.labels).extract_labels()
    vox = evaluate(voxel_lab, gt_vol, K)
    return RunMetrics(frame, float(np.mean([m.accuracy for m in frame])), fused,
                      float(np.mean([m.accuracy for m in fused])), vox)


def majority_baseline(train_labels: Sequence[np.ndarray], test_labels: Sequence[np.ndarray],
                      n_classes: int) -> float:
    """Accuracy on the test pixels of always predicting the most frequent
    training class."""
    cnt = np.zeros(n_classes, np.int64)
    for lab in train_labels:
        v = lab[lab != VOID_ID]
        cnt += np.bincount(v, minlength=n_classes)[:n_classes]
    c = int(cnt.argmax())
    hit = tot = 0
    for lab in test_labels:
        v = lab[lab != VOID_ID]
        hit += int((v == c).sum())
        tot += v.size
    return hit / max(tot, 1)
