"""Per-pixel depth / height / angle-with-gravity / curvature features."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .camera import CameraIntrinsics, Pose, backproject_depth
from .gravity import GravityFrame

DISCONTINUITY = 0.03  # metres
CURVATURE_WINDOW = 11
MIN_NEIGHBOURS = 6
DEPTH_SCALE = 8.0
HEIGHT_SCALE = 3.0
FEATURE_MAGIC = b"DHACIMG1"
CHANNELS = ("depth", "height", "angle", "curvature")


def as_metres(depth) -> np.ndarray:
    """uint16 millimetre rasters become float metres; floats pass through."""
    d = np.asarray(depth)
    if np.issubdtype(d.dtype, np.integer):
        return d.astype(np.float64) / 1000.0
    return d.astype(np.float64)


@dataclass(eq=False)
class FeatureImage:
    data: np.ndarray  # (H, W, 4) float32, normalised to [0, 1], zero where masked
    mask: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.mask.shape

    def to_bytes(self) -> bytes:
        h, w = self.mask.shape
        planes = np.ascontiguousarray(self.data.transpose(2, 0, 1)).astype("<f4")
        return (FEATURE_MAGIC + struct.pack("<3i", w, h, 4) + planes.tobytes()
                + self.mask.astype(np.uint8).tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureImage":
        if data[:8] != FEATURE_MAGIC:
            raise ValueError("bad feature-image magic")
        w, h, c = struct.unpack("<3i", data[8:20])
        n = w * h
        if len(data) != 20 + 4 * c * n + n:
            raise ValueError("truncated feature image")
        planes = np.frombuffer(data, "<f4", c * n, 20).reshape(c, h, w)
        mask = np.frombuffer(data, np.uint8, n, 20 + 4 * c * n).reshape(h, w).astype(bool)
        return cls(np.ascontiguousarray(planes.transpose(1, 2, 0)).astype(np.float32), mask)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureImage":
        return cls.from_bytes(Path(path).read_bytes())


def compute_normals(depth, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame unit normals from central-difference tangents, oriented
    towards the camera. Border pixels, pixels next to invalid depth and pixels
    across a depth jump of more than 3 cm are invalid."""
    d = as_metres(depth)
    P = backproject_depth(d, intrinsics)
    h, w = d.shape
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), bool)
    if h < 3 or w < 3:
        return normals, valid
    c = d[1:-1, 1:-1]
    nb = [d[1:-1, 2:], d[1:-1, :-2], d[2:, 1:-1], d[:-2, 1:-1]]
    ok = c > 0
    for x in nb:
        ok &= (x > 0) & (np.abs(x - c) <= DISCONTINUITY)
    du = P[1:-1, 2:] - P[1:-1, :-2]
    dv = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(du, dv)
    ln = np.linalg.norm(n, axis=-1)
    ok &= ln > 0
    n[ok] /= ln[ok, None]
    flip = np.einsum("ijk,ijk->ij", n, P[1:-1, 1:-1]) > 0
    n[flip] *= -1
    n[~ok] = 0
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok
    return normals, valid


def compute_height(depth, intrinsics: CameraIntrinsics, pose: Pose, gravity: GravityFrame) -> np.ndarray:
    """Height above the floor along the gravity up axis (nan where depth is invalid)."""
    d = as_metres(depth)
    world = pose.transform(backproject_depth(d, intrinsics))
    H = gravity.heights(world)
    H[d <= 0] = np.nan
    return H


def compute_angle(normals_world: np.ndarray, gravity: GravityFrame) -> np.ndarray:
    """Unsigned angle between the surface-normal line and up, in [0, pi/2]."""
    c = np.abs(np.asarray(normals_world) @ gravity.up)
    return np.arccos(np.clip(c, 0.0, 1.0))


@njit(cache=True)
def _curvature(P, d, k, gate, min_nb, out, ok):
    h, w = d.shape
    r = k // 2
    buf = np.empty((k * k, 3))
    for y in range(h):
        for x in range(w):
            dc = d[y, x]
            if dc <= 0.0:
                continue
            m = 0
            for yy in range(max(0, y - r), min(h, y + r + 1)):
                for xx in range(max(0, x - r), min(w, x + r + 1)):
                    dn = d[yy, xx]
                    if dn > 0.0 and abs(dn - dc) <= gate:
                        buf[m, 0] = P[yy, xx, 0]
                        buf[m, 1] = P[yy, xx, 1]
                        buf[m, 2] = P[yy, xx, 2]
                        m += 1
            if m - 1 < min_nb:
                continue
            mean = np.zeros(3)
            for i in range(m):
                mean += buf[i]
            mean /= m
            C = np.zeros((3, 3))
            for i in range(m):
                for a in range(3):
                    da = buf[i, a] - mean[a]
                    for b in range(3):
                        C[a, b] += da * (buf[i, b] - mean[b])
            C /= m
            ev = np.linalg.eigvalsh(C)
            s = ev[0] + ev[1] + ev[2]
            if s <= 0.0:
                out[y, x] = 0.0
            else:
                out[y, x] = max(ev[0], 0.0) / s
            ok[y, x] = True


def compute_curvature(depth, intrinsics: CameraIntrinsics, window: int = CURVATURE_WINDOW):
    """Surface variation lambda0 / (lambda0 + lambda1 + lambda2) of the point
    covariance in a ``window`` x ``window`` neighbourhood. Returns (C, valid)."""
    if window < 3 or window % 2 == 0:
        raise ValueError("curvature window must be odd and >= 3")
    d = as_metres(depth)
    P = backproject_depth(d, intrinsics)
    out = np.zeros(d.shape)
    ok = np.zeros(d.shape, bool)
    _curvature(P, np.ascontiguousarray(d), window, DISCONTINUITY, MIN_NEIGHBOURS, out, ok)
    return out, ok


def normalise(D, H, A, C) -> np.ndarray:
    return np.stack([D / DEPTH_SCALE, np.clip(H / HEIGHT_SCALE, 0.0, 1.0),
                     A / (np.pi / 2), C * 3.0], axis=-1)


def assemble_dhac(depth, intrinsics: CameraIntrinsics, pose: Pose, gravity: GravityFrame,
                  normals_world: np.ndarray | None = None,
                  curvature_window: int = CURVATURE_WINDOW) -> FeatureImage:
    """Stack the four normalised channels; ``normals_world`` defaults to the
    depth-derived normals rotated by ``pose``."""
    d = as_metres(depth)
    n_cam, n_ok = compute_normals(d, intrinsics)
    if normals_world is None:
        normals_world = n_cam @ pose.rotation.T
    else:
        n_ok = n_ok & (np.linalg.norm(normals_world, axis=-1) > 0.5)
    H = compute_height(d, intrinsics, pose, gravity)
    A = compute_angle(normals_world, gravity)
    C, c_ok = compute_curvature(d, intrinsics, curvature_window)
    mask = (d > 0) & n_ok & c_ok & np.isfinite(H)
    feats = normalise(d, np.nan_to_num(H), A, C).astype(np.float32)
    feats[~mask] = 0
    return FeatureImage(feats, mask)
