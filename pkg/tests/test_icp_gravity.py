import numpy as np
import pytest
from hypothesis import given, strategies as st

from semfuse.camera import CameraIntrinsics, Pose, look_at, rotation_about
from semfuse.gravity import DegenerateScatterError, align_gravity, rotation_between
from semfuse.icp import ModelFrame, TrackingLostError, icp_track
from semfuse.render import render_frame

K = CameraIntrinsics.default(160, 120)


def _frame(room, pose):
    d, _ = render_frame(room, K, pose)
    return d / 1000.0


def test_icp_exact_at_optimum(room):
    pose = look_at([1.0, 1.5, 1.2], [3.0, 0.5, 3.0])
    d = _frame(room, pose)
    res = icp_track(ModelFrame.from_depth(d, K, pose), d, pose)
    assert np.abs(res.pose.matrix - pose.matrix).max() < 1e-6
    assert res.iterations <= 2


def test_icp_recovers_perturbation(room, rng):
    truth = look_at([1.0, 1.5, 1.2], [3.0, 0.5, 3.0])
    d = _frame(room, truth)
    model = ModelFrame.from_depth(d, K, truth)
    for _ in range(3):
        dt = rng.standard_normal(3)
        dt *= 0.02 / np.linalg.norm(dt)
        init = Pose(rotation_about(rng.standard_normal(3), np.deg2rad(2)) @ truth.rotation,
                    truth.translation + dt)
        res = icp_track(model, d, init)
        R = res.pose.rotation @ truth.rotation.T
        assert np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))) < 0.2
        assert np.linalg.norm(res.pose.translation - truth.translation) < 0.005
        assert res.iterations <= 20


def test_icp_tracking_lost(room):
    a = look_at([1.0, 1.5, 1.0], [3.5, 1.0, 1.0])
    b = look_at([1.0, 1.5, 1.0], [-1.5, 1.0, 1.0])
    with pytest.raises(TrackingLostError):
        icp_track(ModelFrame.from_depth(_frame(room, a), K, a), _frame(room, b), a)


def _axis_normals(up, n_par=2000, n_orth=4000, seed=0):
    rng = np.random.default_rng(seed)
    up = np.asarray(up, float) / np.linalg.norm(up)
    R = rotation_between([0, 1, 0], up)
    par = np.where(rng.random(n_par)[:, None] < 0.5, 1.0, -1.0) * np.array([0, 1.0, 0])
    a = rng.uniform(0, 2 * np.pi, n_orth)
    orth = np.stack([np.cos(a), np.zeros(n_orth), np.sin(a)], axis=1)
    return np.concatenate([par, orth]) @ R.T


def test_gravity_already_optimal():
    g = align_gravity(_axis_normals([0, 1, 0]))
    assert np.allclose(g.up, [0, 1, 0], atol=1e-12)
    assert g.iterations == 1


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-12, 12))
def test_gravity_recovers_tilt(ax, az, tilt):
    if abs(ax) + abs(az) < 1e-3:
        ax = 1.0
    true_up = rotation_about([ax, 0, az], np.deg2rad(tilt)) @ np.array([0, 1.0, 0])
    g = align_gravity(_axis_normals(true_up))
    assert np.degrees(np.arccos(min(1.0, abs(g.up @ true_up)))) < 0.5
    assert np.allclose(g.rotation @ g.up, [0, 1, 0], atol=1e-9)
    assert np.allclose(g.rotation.T @ g.rotation, np.eye(3), atol=1e-12)


def test_gravity_degenerate():
    n = np.tile([1.0, 0, 0], (2000, 1))
    with pytest.raises(DegenerateScatterError):
        align_gravity(n)


def test_gravity_needs_samples():
    with pytest.raises(ValueError):
        align_gravity(np.tile([0, 1.0, 0], (999, 1)))


def test_floor_level_percentile(rng):
    n = _axis_normals([0, 1, 0])
    pts = np.column_stack([rng.random(5000), rng.uniform(0.3, 2.0, 5000), rng.random(5000)])
    pts[:1000, 1] = 0.25
    g = align_gravity(n, pts)
    assert g.floor_level == pytest.approx(0.25)
    assert g.heights(np.array([[0, 1.25, 0]]))[0] == pytest.approx(1.0)
