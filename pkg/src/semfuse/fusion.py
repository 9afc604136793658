"""Per-voxel Bayesian fusion of per-frame class distributions.

Each voxel keeps the running sum of log class probabilities of every pixel
that landed in it (uniform prior, frames treated as independent), so fusing
is order-independent up to floating-point summation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import CameraIntrinsics, Pose, backproject_depth
from .dhac import as_metres
from .render import render_frame
from .scene import VOID_ID, Scene
from .tsdf import TsdfVolume

PROB_FLOOR = 1e-6
# accumulators this close to the maximum count as tied, so that summation
# order cannot flip exact ties
TIE_TOLERANCE = 1e-9
LABEL_MAGIC = b"LABELVOL"


class GridMismatchError(ValueError):
    pass


class LabelVolume:
    def __init__(self, origin, voxel_size: float, dims, n_classes: int):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.n_classes = int(n_classes)
        self.log_probs = np.zeros(self.dims + (self.n_classes,), np.float64)
        self.count = np.zeros(self.dims, np.int32)

    @classmethod
    def like(cls, volume: TsdfVolume, n_classes: int) -> "LabelVolume":
        return cls(volume.origin, volume.voxel_size, volume.dims, n_classes)

    @property
    def grid(self) -> tuple:
        return tuple(self.origin.tolist()), self.voxel_size, self.dims

    def voxel_ids(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flat voxel index of each point and an in-bounds mask."""
        ijk = np.floor((points - self.origin) / self.voxel_size).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=-1)
        flat = np.ravel_multi_index(tuple(np.where(inside[:, None], ijk, 0).T), self.dims)
        return flat, inside

    def fuse_frame(self, probs: np.ndarray, depth, intrinsics: CameraIntrinsics, pose: Pose,
                   mask: np.ndarray | None = None) -> int:
        """Accumulate one frame; returns the number of valid pixels whose
        surface point fell outside the grid (those are skipped)."""
        probs = np.asarray(probs)
        d = as_metres(depth)
        if probs.shape[:2] != d.shape or probs.shape[2] != self.n_classes:
            raise ValueError("probabilities and depth must share resolution and class count")
        valid = d > 0
        if mask is not None:
            valid &= mask
        pts = pose.transform(backproject_depth(d, intrinsics)[valid])
        flat, inside = self.voxel_ids(pts)
        logp = np.log(np.maximum(probs[valid].astype(np.float64), PROB_FLOOR))
        flat, logp = flat[inside], logp[inside]
        uniq, inv = np.unique(flat, return_inverse=True)
        lp = self.log_probs.reshape(-1, self.n_classes)
        for c in range(self.n_classes):
            lp[uniq, c] += np.bincount(inv, weights=logp[:, c], minlength=len(uniq))
        self.count.reshape(-1)[uniq] += np.bincount(inv, minlength=len(uniq)).astype(np.int32)
        return int((~inside).sum())

    def extract_labels(self) -> np.ndarray:
        """Arg-max class per voxel (lowest id on ties); unobserved -> void."""
        best = self.log_probs.max(axis=-1, keepdims=True)
        lab = (self.log_probs >= best - TIE_TOLERANCE).argmax(axis=-1).astype(np.uint8)
        lab[self.count == 0] = VOID_ID
        return lab

    def posterior(self, ijk) -> np.ndarray:
        a = self.log_probs[tuple(ijk)]
        p = np.exp(a - a.max())
        return p / p.sum()

    def to_bytes(self) -> bytes:
        head = LABEL_MAGIC + struct.pack("<3d d 3i i", *self.origin, self.voxel_size, *self.dims, self.n_classes)
        planes = np.ascontiguousarray(np.moveaxis(self.log_probs, -1, 0)).astype("<f8")
        return head + planes.tobytes() + self.count.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LabelVolume":
        fmt = "<3d d 3i i"
        hs = len(LABEL_MAGIC) + struct.calcsize(fmt)
        if data[:len(LABEL_MAGIC)] != LABEL_MAGIC or len(data) < hs:
            raise ValueError("not a label volume")
        v = struct.unpack(fmt, data[len(LABEL_MAGIC):hs])
        vol = cls(v[0:3], v[3], v[4:7], v[7])
        n = int(np.prod(vol.dims))
        if len(data) != hs + 8 * n * vol.n_classes + 4 * n:
            raise ValueError("truncated label volume")
        planes = np.frombuffer(data, "<f8", n * vol.n_classes, hs).reshape((vol.n_classes,) + vol.dims)
        vol.log_probs = np.ascontiguousarray(np.moveaxis(planes, 0, -1)).astype(np.float64)
        vol.count = np.frombuffer(data, "<i4", n, hs + 8 * n * vol.n_classes).reshape(vol.dims).astype(np.int32)
        return vol

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LabelVolume":
        return cls.from_bytes(Path(path).read_bytes())


def fuse_frame(volume: LabelVolume, probs, depth, intrinsics, pose, mask=None) -> LabelVolume:
    volume.fuse_frame(probs, depth, intrinsics, pose, mask)
    return volume


def extract_labels(volume: LabelVolume) -> np.ndarray:
    return volume.extract_labels()


def one_hot(labels: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Label image -> (H, W, K) distribution and non-void mask."""
    valid = labels != VOID_ID
    p = np.zeros(labels.shape + (n_classes,), np.float64)
    idx = np.where(valid, labels, 0).astype(np.int64)
    np.put_along_axis(p, idx[..., None], 1.0, axis=-1)
    p[~valid] = 1.0 / n_classes
    return p, valid


def render_label_view(labels_vol: LabelVolume, tsdf_vol: TsdfVolume, intrinsics: CameraIntrinsics,
                      pose: Pose, voxel_labels: np.ndarray | None = None) -> np.ndarray:
    """Fused label of the TSDF surface voxel under each pixel."""
    if labels_vol.grid != tsdf_vol.grid:
        raise GridMismatchError("label and TSDF volumes use different grids")
    depth, _ = tsdf_vol.raycast(intrinsics, pose)
    lab = labels_vol.extract_labels() if voxel_labels is None else voxel_labels
    out = np.full(depth.shape, VOID_ID, np.uint8)
    valid = depth > 0
    pts = pose.transform(backproject_depth(depth, intrinsics)[valid])
    flat, inside = labels_vol.voxel_ids(pts)
    vals = np.full(len(flat), VOID_ID, np.uint8)
    vals[inside] = lab.reshape(-1)[flat[inside]]
    out[valid] = vals
    return out


def fuse_ground_truth(scene: Scene, trajectory: Sequence[Pose], intrinsics: CameraIntrinsics,
                      grid: LabelVolume | TsdfVolume) -> LabelVolume:
    """Fuse rendered one-hot ground-truth label images with the same rule as
    predictions."""
    vol = LabelVolume(grid.origin, grid.voxel_size, grid.dims, scene.taxonomy.n_classes)
    for pose in trajectory:
        depth, labels = render_frame(scene, intrinsics, pose)
        p, valid = one_hot(labels, vol.n_classes)
        vol.fuse_frame(p, depth, intrinsics, pose, valid)
    return vol


def ground_truth_volume(scene, trajectory, intrinsics, grid) -> np.ndarray:
    return fuse_ground_truth(scene, trajectory, intrinsics, grid).extract_labels()


def unanimous(volume: LabelVolume) -> np.ndarray:
    """Observed voxels whose fused one-hot observations all agreed."""
    best = volume.log_probs.max(axis=-1)
    return (volume.count > 0) & (best == 0.0)


@dataclass
class SegMetrics:
    accuracy: float
    per_class_accuracy: list[float | None]
    class_average_accuracy: float
    confusion: np.ndarray  # rows: ground truth, columns: prediction
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "class_average_accuracy": self.class_average_accuracy,
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegMetrics":
        return cls(d["accuracy"], d["per_class_accuracy"], d["class_average_accuracy"],
                   np.asarray(d["confusion"], dtype=np.int64), d["n_samples"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(predicted: np.ndarray, truth: np.ndarray, n_classes: int) -> SegMetrics:
    """Confusion-matrix metrics over elements where neither side is void."""
    p = np.asarray(predicted).ravel()
    t = np.asarray(truth).ravel()
    if p.shape != t.shape:
        raise ValueError("prediction and ground truth differ in size")
    keep = (p != VOID_ID) & (t != VOID_ID)
    p, t = p[keep].astype(np.int64), t[keep].astype(np.int64)
    conf = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    n = int(conf.sum())
    support = conf.sum(axis=1)
    per_class = [float(conf[c, c] / support[c]) if support[c] else None for c in range(n_classes)]
    present = [a for a in per_class if a is not None]
    return SegMetrics(float(np.trace(conf) / n) if n else 0.0, per_class,
                      float(np.mean(present)) if present else 0.0, conf, n)
