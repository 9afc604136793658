"""Gravity direction estimation from surface normals.

Normals close to the current up estimate are treated as horizontal-surface
samples and normals close to perpendicular as vertical-surface samples; the
new up direction is the one most aligned with the first set and most
orthogonal to the second.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import WORLD_UP

SET_ANGLE_DEG = 15.0
STOP_DEG = 0.01
MAX_ITERATIONS = 10
MIN_SAMPLES = 1000
FLOOR_PERCENTILE = 1.0


class DegenerateScatterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GravityFrame:
    rotation: np.ndarray  # maps reconstruction-frame vectors into the gravity-aligned frame
    up: np.ndarray  # unit up vector in the reconstruction frame
    floor_level: float = 0.0
    iterations: int = 0

    @classmethod
    def identity(cls, floor_level: float = 0.0) -> "GravityFrame":
        return cls(np.eye(3), WORLD_UP.copy(), floor_level, 0)

    def heights(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.up - self.floor_level


def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector a onto unit vector b."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # 180 degrees about any axis perpendicular to a
        axis = np.cross(a, [1.0, 0, 0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0, 0, 1.0])
        axis /= np.linalg.norm(axis)
        return 2 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)


def align_gravity(normals: np.ndarray, points: np.ndarray | None = None,
                  init_up=WORLD_UP, set_angle_deg: float = SET_ANGLE_DEG,
                  max_iterations: int = MAX_ITERATIONS) -> GravityFrame:
    """Estimate the up direction from (N, 3) unit normals.

    With ``points`` given, the floor level is the 1st percentile of point
    heights along the recovered up axis.
    """
    N = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    N = N[np.isfinite(N).all(axis=1)]
    nrm = np.linalg.norm(N, axis=1)
    N = N[nrm > 0.5] / nrm[nrm > 0.5, None]
    if len(N) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} normal samples, got {len(N)}")
    up = np.asarray(init_up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    par_cos = np.cos(np.deg2rad(set_angle_deg))
    orth_sin = np.sin(np.deg2rad(set_angle_deg))

    it = 0
    for it in range(1, max_iterations + 1):
        c = np.abs(N @ up)
        par = N[c > par_cos]
        orth = N[c < orth_sin]
        if len(par) + len(orth) == 0:
            raise DegenerateScatterError("no normals near parallel or perpendicular to up")
        M = par.T @ par - orth.T @ orth
        evals, evecs = np.linalg.eigh(M)
        scale = max(len(par) + len(orth), 1)
        if evals[2] - evals[1] <= 1e-9 * scale:
            raise DegenerateScatterError("scatter has no dominant direction")
        new_up = evecs[:, 2]
        if new_up @ up < 0:
            new_up = -new_up
        delta = np.degrees(np.arccos(np.clip(new_up @ up, -1.0, 1.0)))
        up = new_up / np.linalg.norm(new_up)
        if delta < STOP_DEG:
            break

    floor = 0.0
    if points is not None:
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        P = P[np.isfinite(P).all(axis=1)]
        if len(P):
            floor = float(np.percentile(P @ up, FLOOR_PERCENTILE))
    return GravityFrame(rotation_between(up, WORLD_UP), up, floor, it)
