"""Reproducible experiments on procedural rooms. Each returns plain numbers so
callers decide pass/fail thresholds."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, Pose, rotation_about, rotation_angle
from .fusion import LabelVolume, evaluate, fuse_ground_truth, one_hot
from .gravity import align_gravity
from .icp import ModelFrame, icp_track
from .pipeline import (FrameSequence, majority_baseline, orbit, random_views, room_spec,
                       run_sequence, score_run, training_set)
from .render import render_frame
from .scene import VOID_ID, RoomSpec, generate_room
from .segnet import AutoencoderStack, TrainConfig, train_stack
from .tsdf import TsdfVolume


def render_sequence(scene, intrinsics, poses) -> FrameSequence:
    depth, labels = [], []
    for p in poses:
        d, l = render_frame(scene, intrinsics, p)
        depth.append(d)
        labels.append(l)
    return FrameSequence(scene, depth, labels, list(poses), intrinsics)


# -- geometry -----------------------------------------------------------------

@dataclass
class RoundTrip:
    fraction_within: float
    n_pixels: int
    voxel_size: float
    seconds: float
    volume: TsdfVolume


def geometry_round_trip(seed: int = 0, n_frames: int = 30, dims: int = 128,
                        intrinsics: CameraIntrinsics | None = None) -> RoundTrip:
    """Fuse ``n_frames`` ground-truth-pose views, raycast a held-out pose and
    compare with directly rendered depth."""
    K = intrinsics or CameraIntrinsics.default()
    t0 = time.perf_counter()
    scene = generate_room(room_spec(seed))
    vol = TsdfVolume.for_bounds(scene.bounds, dims)
    for pose in orbit(scene, n_frames):
        d, _ = render_frame(scene, K, pose)
        vol.integrate(d / 1000.0, K, pose)
    held = orbit(scene, 1, start_angle=np.pi / n_frames, radius_frac=0.5, height=1.5)[0]
    rd, _ = vol.raycast(K, held)
    gd, _ = render_frame(scene, K, held)
    gd = gd / 1000.0
    both = (rd > 0) & (gd > 0)
    err = np.abs(rd - gd)[both]
    return RoundTrip(float((err <= 2 * vol.voxel_size).mean()), int(both.sum()), vol.voxel_size,
                     time.perf_counter() - t0, vol)


@dataclass
class IcpTrial:
    rotation_error_deg: float
    translation_error_m: float
    iterations: int


def icp_recovery(seed: int = 0, rot_deg: float = 2.0, trans_m: float = 0.02,
                 intrinsics: CameraIntrinsics | None = None) -> IcpTrial:
    """Track a frame from a perturbed initialisation against the rendered
    model of the true pose on noise-free depth."""
    K = intrinsics or CameraIntrinsics.default(320, 240)
    rng = np.random.default_rng([seed, 3])
    scene = generate_room(room_spec(seed))
    truth = random_views(scene, 1, seed)[0]
    d, _ = render_frame(scene, K, truth)
    d = d / 1000.0
    model = ModelFrame.from_depth(d, K, truth)
    axis = rng.standard_normal(3)
    shift = rng.standard_normal(3)
    shift *= trans_m / np.linalg.norm(shift)
    init = Pose(rotation_about(axis, np.deg2rad(rot_deg)) @ truth.rotation, truth.translation + shift)
    res = icp_track(model, d, init)
    dr = rotation_angle(res.pose.rotation @ truth.rotation.T)
    return IcpTrial(float(np.degrees(dr)), float(np.linalg.norm(res.pose.translation - truth.translation)),
                    res.iterations)


@dataclass
class GravityTrial:
    angle_error_deg: float
    floor_height_max_abs: float
    voxel_size: float


def tilted_room_normals(seed: int, tilt_deg: float = 10.0):
    """Normals and points of a rendered room, rigidly tilted about x."""
    scene = generate_room(room_spec(seed))
    K = CameraIntrinsics.default(160, 120)
    from .dhac import compute_normals
    R = rotation_about([1.0, 0, 0], np.deg2rad(tilt_deg))
    N, P, floor = [], [], []
    for pose in orbit(scene, 8):
        d, lab = render_frame(scene, K, pose)
        dm = d / 1000.0
        n, ok = compute_normals(dm, K)
        from .camera import backproject_depth
        pts = pose.transform(backproject_depth(dm, K))
        N.append((n @ pose.rotation.T)[ok])
        P.append(pts[ok])
        floor.append((lab == scene.taxonomy.id_of("floor"))[ok])
    N = np.concatenate(N) @ R.T
    P = np.concatenate(P) @ R.T
    return N, P, np.concatenate(floor), R @ np.array([0.0, 1.0, 0.0]), scene


def gravity_recovery(seed: int = 0, tilt_deg: float = 10.0, dims: int = 128) -> GravityTrial:
    N, P, is_floor, true_up, scene = tilted_room_normals(seed, tilt_deg)
    g = align_gravity(N, P)
    err = np.degrees(np.arccos(np.clip(abs(g.up @ true_up), -1, 1)))
    vs = TsdfVolume.for_bounds(scene.bounds, dims).voxel_size
    h = g.heights(P[is_floor])
    return GravityTrial(float(err), float(np.abs(h).max()), vs)


# -- fusion ---------------------------------------------------------------------

def corrupt(labels: np.ndarray, n_classes: int, rng: np.random.Generator,
            fraction: float = 0.25, peak: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Replace ``fraction`` of the valid pixels with a random class, then
    soften every label to ``peak`` on the labelled class."""
    lab = labels.copy()
    valid = lab != VOID_ID
    flip = valid & (rng.random(lab.shape) < fraction)
    lab[flip] = rng.integers(0, n_classes, int(flip.sum()))
    p, _ = one_hot(lab, n_classes)
    p = p * (peak - (1 - peak) / (n_classes - 1)) + (1 - peak) / (n_classes - 1)
    p[~valid] = 1.0 / n_classes
    return p, valid


@dataclass
class FusionTrial:
    fused_accuracy: float
    frame_mean_accuracy: float
    labels: LabelVolume


def fusion_benefit(seed: int, n_frames: int = 20,
                   intrinsics: CameraIntrinsics | None = None) -> FusionTrial:
    """Fuse corrupted ground-truth frames; compare the fused voxel labels and
    each single frame's voxel labels with the ground-truth volume."""
    K = intrinsics or CameraIntrinsics.default(160, 120)
    scene = generate_room(room_spec(seed))
    poses = orbit(scene, n_frames, start_angle=0.1 * seed)
    grid = TsdfVolume.for_bounds(scene.bounds)
    n_cls = scene.taxonomy.n_classes
    gt = fuse_ground_truth(scene, poses, K, grid).extract_labels()
    rng = np.random.default_rng([seed, 5])
    fused = LabelVolume.like(grid, n_cls)
    per_frame = []
    for pose in poses:
        d, lab = render_frame(scene, K, pose)
        p, valid = corrupt(lab, n_cls, rng)
        fused.fuse_frame(p, d, K, pose, valid)
        single = LabelVolume.like(grid, n_cls)
        single.fuse_frame(p, d, K, pose, valid)
        per_frame.append(evaluate(single.extract_labels(), gt, n_cls).accuracy)
    return FusionTrial(evaluate(fused.extract_labels(), gt, n_cls).accuracy,
                       float(np.mean(per_frame)), fused)


def order_invariance(seed: int = 0, n_frames: int = 12) -> tuple[float, bool]:
    """Max accumulator difference and label equality between forward and
    permuted fusion order of the same corrupted frames."""
    K = CameraIntrinsics.default(160, 120)
    scene = generate_room(room_spec(seed))
    poses = orbit(scene, n_frames)
    grid = TsdfVolume.for_bounds(scene.bounds)
    n_cls = scene.taxonomy.n_classes
    rng = np.random.default_rng([seed, 9])
    frames = []
    for pose in poses:
        d, lab = render_frame(scene, K, pose)
        frames.append((corrupt(lab, n_cls, rng), d, pose))
    a = LabelVolume.like(grid, n_cls)
    b = LabelVolume.like(grid, n_cls)
    for (p, v), d, pose in frames:
        a.fuse_frame(p, d, K, pose, v)
    for j in rng.permutation(n_frames):
        (p, v), d, pose = frames[j]
        b.fuse_frame(p, d, K, pose, v)
    diff = float(np.abs(a.log_probs - b.log_probs).max())
    same = bool(np.array_equal(a.extract_labels(), b.extract_labels()) and np.array_equal(a.count, b.count))
    return diff, same


# -- end to end -------------------------------------------------------------------

@dataclass
class EndToEnd:
    train_accuracies: list[float]
    frame_accuracy: float
    fused_frame_accuracy: float
    voxel_accuracy: float
    baseline_accuracy: float
    seconds: float
    stack: AutoencoderStack
    labels: LabelVolume
    volume: TsdfVolume


def end_to_end(seed: int = 0, train_views: int = 100, test_frames: int = 30,
               config: TrainConfig | None = None,
               intrinsics: CameraIntrinsics | None = None) -> EndToEnd:
    """Train on rendered views of three rooms, then reconstruct, segment and
    fuse an orbit of a fourth room."""
    t0 = time.perf_counter()
    K = intrinsics or CameraIntrinsics.default(160, 120)
    cfg = config or TrainConfig(epochs=5, seed=seed)
    counts = [train_views // 3 + (1 if i < train_views % 3 else 0) for i in range(3)]
    train = []
    for i, n in enumerate(counts):
        s = 4 * seed + i
        scene = generate_room(room_spec(s))
        train.append(render_sequence(scene, K, random_views(scene, n, s)))
    stack, reports = train_stack(cfg, training_set(train))
    test_scene = generate_room(room_spec(4 * seed + 3))
    seq = render_sequence(test_scene, K, orbit(test_scene, test_frames))
    res = run_sequence(seq, stack)
    m = score_run(res, seq)
    base = majority_baseline([l for s in train for l in s.labels], seq.labels, cfg.classes)
    return EndToEnd([r.train_accuracy for r in reports], m.frame_mean_accuracy,
                    m.fused_frame_mean_accuracy, m.voxel.accuracy, base,
                    time.perf_counter() - t0, stack, res.labels, res.volume)


def render_timing(n_frames: int = 100, tessellation: int = 128) -> tuple[int, float, float]:
    """(triangle count, worst single-view seconds, total seconds) for VGA
    depth and label renders of a densely tessellated room."""
    scene = generate_room(RoomSpec(n_chairs=3, n_tables=1, seed=7, tessellation=tessellation))
    K = CameraIntrinsics.default()
    poses = orbit(scene, n_frames)
    render_frame(scene, K, poses[0])  # compile and build the hierarchy
    worst = 0.0
    t0 = time.perf_counter()
    for p in poses:
        t = time.perf_counter()
        render_frame(scene, K, p)
        worst = max(worst, time.perf_counter() - t)
    return scene.n_triangles, worst, time.perf_counter() - t0
