"""Pinhole intrinsics, rigid camera poses and orbit trajectories.

Camera frame: +X right, +Y down, +Z along the optical axis. A :class:`Pose`
maps camera-frame points into the world frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORLD_UP = np.array([0.0, 1.0, 0.0])


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int = 640, height: int = 480, focal: float = 525.0) -> "CameraIntrinsics":
        """Kinect-like camera; focal length scales with width relative to VGA."""
        f = focal * width / 640.0
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) camera-frame directions (x, y, 1) through pixel centres."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        rays[..., 2] = 1.0
        return rays


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def matrix3x4(self) -> np.ndarray:
        return self.matrix[:3]

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.eye(3)
    k = axis / n
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * (Kx @ Kx)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of R in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def project(point, intrinsics: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = (float(c) for c in point)
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    return intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy


def backproject(u: float, v: float, depth_mm: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    if depth_mm <= 0:
        raise ValueError("depth must be positive")
    z = depth_mm / 1000.0
    return np.array([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z])


def backproject_depth(depth_m: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """(H, W) metric depth -> (H, W, 3) camera-frame points (zeros stay at the origin)."""
    return intrinsics.pixel_rays() * np.asarray(depth_m, dtype=np.float64)[..., None]


def look_at(eye, target, up=WORLD_UP) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    x = np.cross(f, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("viewing direction parallel to up vector")
    x /= nx
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    return Pose(R, eye)


def generate_trajectory(bounds, n_frames: int, radius: float, height: float,
                        start_angle: float = 0.0, sweep: float = 2 * np.pi,
                        target=None) -> list[Pose]:
    """Orbit the centre of ``bounds`` at ``radius`` (horizontal) and absolute
    ``height``, every camera looking at the centre (or ``target``).

    Frames are spaced ``sweep / n_frames`` apart so a full circle never
    repeats its first pose.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    bounds = np.asarray(bounds, dtype=np.float64)
    centre = bounds.mean(axis=0) if target is None else np.asarray(target, dtype=np.float64)
    poses = []
    for i in range(n_frames):
        a = start_angle + sweep * i / n_frames
        eye = np.array([centre[0] + radius * np.cos(a), height, centre[2] + radius * np.sin(a)])
        poses.append(look_at(eye, centre))
    return poses
