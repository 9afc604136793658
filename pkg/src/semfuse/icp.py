"""Frame-to-model point-to-plane ICP with projective data association."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, Pose, backproject_depth, rotation_about

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 100
DISTANCE_GATE = 0.1
NORMAL_GATE_DEG = 30.0
MAX_ITERATIONS = 20
RELATIVE_TOLERANCE = 1e-6
STEP_TOLERANCE = 1e-12  # increment norm treated as converged


class TrackingLostError(RuntimeError):
    pass


@dataclass
class ModelFrame:
    """World-frame vertex and normal maps predicted for one camera view."""

    points: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (H, W, 3), zero where undefined
    valid: np.ndarray  # (H, W) bool
    intrinsics: CameraIntrinsics
    pose: Pose

    @classmethod
    def from_raycast(cls, depth_m, normals_world, intrinsics, pose) -> "ModelFrame":
        pts = pose.transform(backproject_depth(depth_m, intrinsics))
        valid = (np.asarray(depth_m) > 0) & (np.linalg.norm(normals_world, axis=-1) > 0.5)
        return cls(pts, np.asarray(normals_world, dtype=np.float64), valid, intrinsics, pose)

    @classmethod
    def from_depth(cls, depth_m, intrinsics, pose) -> "ModelFrame":
        from .dhac import compute_normals
        n_cam, ok = compute_normals(depth_m, intrinsics)
        return cls.from_raycast(np.where(ok, depth_m, 0.0), n_cam @ pose.rotation.T, intrinsics, pose)


@dataclass
class IcpResult:
    pose: Pose
    iterations: int
    residual: float
    n_correspondences: int


def _associate(model: ModelFrame, src_pts, src_nrm, pose: Pose):
    """Projective association of live points (camera frame) under ``pose``."""
    p = src_pts @ pose.rotation.T + pose.translation
    n = src_nrm @ pose.rotation.T
    mp = model.pose
    q = (p - mp.translation) @ mp.rotation
    K = model.intrinsics
    z = q[:, 2]
    ok = z > 0
    u = np.full(len(q), -1, np.int64)
    v = np.full(len(q), -1, np.int64)
    u[ok] = np.floor(K.fx * q[ok, 0] / z[ok] + K.cx + 0.5).astype(np.int64)
    v[ok] = np.floor(K.fy * q[ok, 1] / z[ok] + K.cy + 0.5).astype(np.int64)
    ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    idx = np.flatnonzero(ok)
    ok_m = model.valid[v[idx], u[idx]]
    idx = idx[ok_m]
    m_pts = model.points[v[idx], u[idx]]
    m_nrm = model.normals[v[idx], u[idx]]
    p, n = p[idx], n[idx]
    gate = (np.linalg.norm(p - m_pts, axis=1) < DISTANCE_GATE) & \
           (np.einsum("ij,ij->i", n, m_nrm) > np.cos(np.deg2rad(NORMAL_GATE_DEG)))
    return p[gate], m_pts[gate], m_nrm[gate]


def icp_track(model: ModelFrame, live_depth_m: np.ndarray, init_pose: Pose,
              intrinsics: CameraIntrinsics | None = None,
              max_iterations: int = MAX_ITERATIONS) -> IcpResult:
    """Estimate the live camera pose by minimising
    sum(((R p + t - q) . n)^2) over projectively associated pairs."""
    from .dhac import compute_normals
    K = intrinsics or model.intrinsics
    live_depth_m = np.asarray(live_depth_m, dtype=np.float64)
    n_cam, ok = compute_normals(live_depth_m, K)
    pts = backproject_depth(live_depth_m, K)[ok]
    nrm = n_cam[ok]

    pose = init_pose
    prev_err = None
    err = 0.0
    it = 0
    n_corr = 0
    for it in range(1, max_iterations + 1):
        s, q, n = _associate(model, pts, nrm, pose)
        n_corr = len(s)
        if n_corr < MIN_CORRESPONDENCES:
            raise TrackingLostError(f"only {n_corr} correspondences at iteration {it}")
        r = np.einsum("ij,ij->i", s - q, n)
        err = float(r @ r) / n_corr
        if prev_err is not None and (prev_err == 0 or abs(prev_err - err) / prev_err < RELATIVE_TOLERANCE):
            break
        if err == 0.0:
            break
        J = np.hstack([np.cross(s, n), n])
        A = J.T @ J
        b = -J.T @ r
        x = np.linalg.solve(A, b)
        if np.linalg.norm(x) < STEP_TOLERANCE:
            break
        w, dt = x[:3], x[3:]
        dR = rotation_about(w, np.linalg.norm(w))
        pose = Pose(dR @ pose.rotation, dR @ pose.translation + dt)
        # re-orthonormalise against drift
        U, _, Vt = np.linalg.svd(pose.rotation)
        pose = Pose(U @ Vt, pose.translation)
        prev_err = err
    logger.debug("icp: %d iterations, residual %.3g, %d pairs", it, err, n_corr)
    return IcpResult(pose, it, err, n_corr)
