"""Truncated signed distance volume: integration, raycasting and dumps.

Voxel (i, j, k) has its centre at ``origin + (index + 0.5) * voxel_size``.
Unobserved voxels hold tsdf = 1 and weight = 0 so rays march through them as
free space.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numba import njit

from .camera import CameraIntrinsics, Pose

MAGIC = b"TSDFVOL1"
DEFAULT_DIMS = 128
DEFAULT_MARGIN = 0.5
TRUNCATION_VOXELS = 4.0
MAX_WEIGHT = 100.0


class VolumeFormatError(ValueError):
    pass


@njit(cache=True)
def _integrate(tsdf, weight, origin, vs, R, t, fx, fy, cx, cy, depth, mu, w, w_max):
    nx, ny, nz = tsdf.shape
    h, wd = depth.shape
    updated = 0
    for i in range(nx):
        px = origin[0] + (i + 0.5) * vs - t[0]
        for j in range(ny):
            py = origin[1] + (j + 0.5) * vs - t[1]
            for k in range(nz):
                pz = origin[2] + (k + 0.5) * vs - t[2]
                # camera coordinates: R^T (p - t)
                zc = R[0, 2] * px + R[1, 2] * py + R[2, 2] * pz
                if zc <= 0.0:
                    continue
                xc = R[0, 0] * px + R[1, 0] * py + R[2, 0] * pz
                yc = R[0, 1] * px + R[1, 1] * py + R[2, 1] * pz
                u = int(np.floor(fx * xc / zc + cx + 0.5))
                v = int(np.floor(fy * yc / zc + cy + 0.5))
                if u < 0 or u >= wd or v < 0 or v >= h:
                    continue
                d = depth[v, u]
                if d <= 0.0:
                    continue
                sdf = d - zc
                if sdf < -mu:
                    continue
                f = min(1.0, sdf / mu)
                W = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * W + f * w) / (W + w)
                weight[i, j, k] = min(W + w, w_max)
                updated += 1
    return updated


@njit(cache=True)
def _sample(tsdf, weight, gx, gy, gz):
    """Trilinear tsdf at continuous grid coords (voxel-centre units).
    Returns nan when any of the 8 corners is unobserved or outside."""
    nx, ny, nz = tsdf.shape
    i0 = int(np.floor(gx))
    j0 = int(np.floor(gy))
    k0 = int(np.floor(gz))
    if i0 < 0 or j0 < 0 or k0 < 0 or i0 + 1 >= nx or j0 + 1 >= ny or k0 + 1 >= nz:
        return np.nan
    fx = gx - i0
    fy = gy - j0
    fz = gz - k0
    acc = 0.0
    for di in range(2):
        wx = fx if di else 1.0 - fx
        for dj in range(2):
            wy = fy if dj else 1.0 - fy
            for dk in range(2):
                wz = fz if dk else 1.0 - fz
                if weight[i0 + di, j0 + dj, k0 + dk] <= 0.0:
                    return np.nan
                acc += wx * wy * wz * tsdf[i0 + di, j0 + dj, k0 + dk]
    return acc


@njit(cache=True)
def _raycast(tsdf, weight, origin, vs, R, t, fx, fy, cx, cy, width, height, depth_out, normal_out):
    nx, ny, nz = tsdf.shape
    # sampling domain: between first and last voxel centres
    lo0 = origin[0] + 0.5 * vs
    lo1 = origin[1] + 0.5 * vs
    lo2 = origin[2] + 0.5 * vs
    hi0 = origin[0] + (nx - 0.5) * vs
    hi1 = origin[1] + (ny - 0.5) * vs
    hi2 = origin[2] + (nz - 0.5) * vs
    step = 0.5 * vs
    for v in range(height):
        for u in range(width):
            x = (u - cx) / fx
            y = (v - cy) / fy
            norm = np.sqrt(x * x + y * y + 1.0)
            zc = 1.0 / norm
            x *= zc
            y *= zc
            d0 = R[0, 0] * x + R[0, 1] * y + R[0, 2] * zc
            d1 = R[1, 0] * x + R[1, 1] * y + R[1, 2] * zc
            d2 = R[2, 0] * x + R[2, 1] * y + R[2, 2] * zc
            tn = 0.0
            tf = np.inf
            for a in range(3):
                o = t[a]
                d = d0 if a == 0 else (d1 if a == 1 else d2)
                lo = lo0 if a == 0 else (lo1 if a == 1 else lo2)
                hi = hi0 if a == 0 else (hi1 if a == 1 else hi2)
                if d == 0.0:
                    if o < lo or o > hi:
                        tf = -1.0
                    continue
                ta = (lo - o) / d
                tb = (hi - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                tn = max(tn, ta)
                tf = min(tf, tb)
            depth_out[v, u] = 0.0
            normal_out[v, u, 0] = 0.0
            normal_out[v, u, 1] = 0.0
            normal_out[v, u, 2] = 0.0
            if tn >= tf:
                continue
            prev = np.nan
            tp = tn
            tc = tn
            while tc <= tf:
                gx = (t[0] + tc * d0 - origin[0]) / vs - 0.5
                gy = (t[1] + tc * d1 - origin[1]) / vs - 0.5
                gz = (t[2] + tc * d2 - origin[2]) / vs - 0.5
                cur = _sample(tsdf, weight, gx, gy, gz)
                if prev > 0.0 and cur <= 0.0:
                    ts = tp + (tc - tp) * prev / (prev - cur)
                    depth_out[v, u] = ts * zc
                    qx = (t[0] + ts * d0 - origin[0]) / vs - 0.5
                    qy = (t[1] + ts * d1 - origin[1]) / vs - 0.5
                    qz = (t[2] + ts * d2 - origin[2]) / vs - 0.5
                    n0 = _sample(tsdf, weight, qx + 1, qy, qz) - _sample(tsdf, weight, qx - 1, qy, qz)
                    n1 = _sample(tsdf, weight, qx, qy + 1, qz) - _sample(tsdf, weight, qx, qy - 1, qz)
                    n2 = _sample(tsdf, weight, qx, qy, qz + 1) - _sample(tsdf, weight, qx, qy, qz - 1)
                    nn = np.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
                    if nn > 0.0 and np.isfinite(nn):
                        normal_out[v, u, 0] = n0 / nn
                        normal_out[v, u, 1] = n1 / nn
                        normal_out[v, u, 2] = n2 / nn
                    break
                prev = cur
                tp = tc
                tc += step


class TsdfVolume:
    """Dense TSDF grid with per-voxel integration weights."""

    def __init__(self, origin, voxel_size: float, dims=(DEFAULT_DIMS,) * 3,
                 mu: float | None = None, max_weight: float = MAX_WEIGHT):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.mu = float(mu) if mu is not None else TRUNCATION_VOXELS * self.voxel_size
        self.max_weight = float(max_weight)
        if self.voxel_size <= 0 or self.mu <= 0 or min(self.dims) < 2:
            raise ValueError("invalid volume geometry")
        self.tsdf = np.ones(self.dims, np.float32)
        self.weight = np.zeros(self.dims, np.float32)

    @classmethod
    def for_bounds(cls, bounds, dims: int = DEFAULT_DIMS, margin: float = DEFAULT_MARGIN, **kw) -> "TsdfVolume":
        """Cubic voxels; the longest padded extent spans ``dims`` voxels."""
        b = np.asarray(bounds, dtype=np.float64)
        lo, hi = b[0] - margin, b[1] + margin
        vs = float((hi - lo).max()) / dims
        centre = (lo + hi) / 2
        return cls(centre - vs * dims / 2, vs, (dims,) * 3, **kw)

    @property
    def grid(self) -> tuple:
        return tuple(self.origin.tolist()), self.voxel_size, self.dims

    def integrate(self, depth_m: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose,
                  frame_weight: float = 1.0) -> int:
        """Fuse one metric depth map (0 = invalid); returns the number of
        voxels updated."""
        if frame_weight <= 0:
            raise ValueError("frame weight must be positive")
        depth = np.ascontiguousarray(depth_m, dtype=np.float64)
        if depth.shape != intrinsics.shape:
            raise ValueError("depth does not match intrinsics")
        return _integrate(self.tsdf, self.weight, self.origin, self.voxel_size, pose.rotation,
                          pose.translation, float(intrinsics.fx), float(intrinsics.fy),
                          float(intrinsics.cx), float(intrinsics.cy), depth, self.mu,
                          float(frame_weight), self.max_weight)

    def raycast(self, intrinsics: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
        """Model depth (float64 metres, 0 = no surface) and world-frame unit
        normals (zero where undefined)."""
        h, w = intrinsics.shape
        depth = np.zeros((h, w))
        normals = np.zeros((h, w, 3))
        _raycast(self.tsdf, self.weight, self.origin, self.voxel_size, pose.rotation, pose.translation,
                 float(intrinsics.fx), float(intrinsics.fy), float(intrinsics.cx), float(intrinsics.cy),
                 w, h, depth, normals)
        return depth, normals

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        """Index of the voxel containing each point (may be out of range)."""
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<3d d 3i d d", *self.origin, self.voxel_size, *self.dims,
                                   self.mu, self.max_weight)
        return head + self.tsdf.astype("<f4").tobytes() + self.weight.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TsdfVolume":
        fmt = "<3d d 3i d d"
        hsize = len(MAGIC) + struct.calcsize(fmt)
        if data[:len(MAGIC)] != MAGIC:
            raise VolumeFormatError("bad TSDF magic")
        if len(data) < hsize:
            raise VolumeFormatError("truncated TSDF header")
        vals = struct.unpack(fmt, data[len(MAGIC):hsize])
        vol = cls(vals[0:3], vals[3], vals[4:7], vals[7], vals[8])
        n = int(np.prod(vol.dims))
        if len(data) != hsize + 8 * n:
            raise VolumeFormatError("truncated TSDF payload")
        vol.tsdf = np.frombuffer(data, "<f4", n, hsize).reshape(vol.dims).astype(np.float32)
        vol.weight = np.frombuffer(data, "<f4", n, hsize + 4 * n).reshape(vol.dims).astype(np.float32)
        return vol

    @classmethod
    def load(cls, path: str | Path) -> "TsdfVolume":
        return cls.from_bytes(Path(path).read_bytes())


def integrate(volume: TsdfVolume, depth_m, intrinsics, pose, frame_weight: float = 1.0) -> TsdfVolume:
    volume.integrate(depth_m, intrinsics, pose, frame_weight)
    return volume


def raycast(volume: TsdfVolume, intrinsics, pose):
    return volume.raycast(intrinsics, pose)
