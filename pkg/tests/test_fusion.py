import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semfuse.camera import CameraIntrinsics, look_at
from semfuse.fusion import (GridMismatchError, LabelVolume, SegMetrics, evaluate, fuse_ground_truth,
                            one_hot, render_label_view, unanimous)
from semfuse.scene import VOID_ID, RoomSpec, generate_room
from semfuse.tsdf import TsdfVolume

K = CameraIntrinsics.default(16, 12)
POSE = look_at([0.5, 0.5, 0.0], [0.5, 0.5, 1.0])  # looking along +z


def _vol(n_classes=2):
    return LabelVolume(np.zeros(3), 0.1, (10, 10, 20), n_classes)


def _flat(value, n_classes=2):
    p = np.broadcast_to(np.asarray(value, float), (K.height, K.width, n_classes)).copy()
    return p


def test_single_observation_posterior():
    v = _vol()
    v.fuse_frame(_flat([0.7, 0.3]), np.full(K.shape, 1.05), K, POSE)
    hit = np.argwhere(v.count > 0)
    assert len(hit) > 0
    for ijk in hit[:5]:
        n = v.count[tuple(ijk)]
        post = v.posterior(ijk)
        # n identical observations of (0.7, 0.3): posterior 0.7^n / (0.7^n + 0.3^n)
        assert post[0] == pytest.approx(0.7**n / (0.7**n + 0.3**n), abs=1e-12)
    assert (v.extract_labels()[v.count > 0] == 0).all()


def test_two_observations_closed_form():
    v = LabelVolume(np.zeros(3), 10.0, (1, 1, 1), 2)  # one voxel swallows every pixel
    d = np.zeros(K.shape)
    d[5, 5] = 1.0
    v.fuse_frame(_flat([0.6, 0.4]), d, K, POSE)
    v.fuse_frame(_flat([0.6, 0.4]), d, K, POSE)
    assert v.count[0, 0, 0] == 2
    assert v.posterior((0, 0, 0))[0] == pytest.approx(0.36 / 0.52, abs=1e-9)


def test_invalid_depth_is_ignored():
    v = _vol()
    v.fuse_frame(_flat([0.1, 0.9]), np.zeros(K.shape), K, POSE)
    assert v.count.sum() == 0 and not v.log_probs.any()
    assert (v.extract_labels() == VOID_ID).all()


def test_mask_and_out_of_grid():
    v = _vol()
    mask = np.zeros(K.shape, bool)
    mask[:, :4] = True
    skipped = v.fuse_frame(_flat([0.1, 0.9]), np.full(K.shape, 1.0), K, POSE, mask)
    assert v.count.sum() + skipped == mask.sum() and v.count.sum() > 0
    far = v.fuse_frame(_flat([0.1, 0.9]), np.full(K.shape, 50.0), K, POSE)
    assert far == K.width * K.height


def test_tie_goes_to_lowest_id():
    v = LabelVolume(np.zeros(3), 1.0, (1, 1, 1), 3)
    v.log_probs[0, 0, 0] = [-1.0, -0.5, -0.5]
    v.count[:] = 1
    assert v.extract_labels()[0, 0, 0] == 1


def test_argmax_of_accumulator():
    v = LabelVolume(np.zeros(3), 1.0, (1, 1, 1), 5)
    v.log_probs[0, 0, 0] = [-1, -2, -3, -4, -5]
    v.count[:] = 3
    assert v.extract_labels()[0, 0, 0] == 0


def test_probability_floor():
    v = LabelVolume(np.zeros(3), 10.0, (1, 1, 1), 2)
    d = np.zeros(K.shape)
    d[5, 5] = 1.0
    v.fuse_frame(_flat([1.0, 0.0]), d, K, POSE)
    assert np.isfinite(v.log_probs).all()
    assert v.log_probs[0, 0, 0, 1] == pytest.approx(np.log(1e-6))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        _vol().fuse_frame(np.full((K.height, K.width, 3), 1 / 3), np.ones(K.shape), K, POSE)


def test_one_hot():
    lab = np.array([[0, 1], [VOID_ID, 2]], np.uint8)
    p, valid = one_hot(lab, 3)
    assert np.array_equal(valid, lab != VOID_ID)
    assert np.array_equal(p[0, 1], [0, 1, 0])
    assert np.allclose(p[1, 0], 1 / 3)


def test_dump_round_trip(tmp_path, rng):
    v = _vol(3)
    v.log_probs[:] = -rng.random(v.log_probs.shape)
    v.count[:] = rng.integers(0, 4, v.count.shape)
    v.save(tmp_path / "a.lvol")
    w = LabelVolume.load(tmp_path / "a.lvol")
    assert w.grid == v.grid and w.n_classes == 3
    assert np.array_equal(w.log_probs, v.log_probs) and np.array_equal(w.count, v.count)
    with pytest.raises(ValueError):
        LabelVolume.from_bytes(v.to_bytes()[:-1])
    with pytest.raises(ValueError):
        LabelVolume.from_bytes(b"X" * 100)


# -- label rendering against a reconstructed wall ------------------------------

@pytest.fixture(scope="module")
def wall_scene():
    scene = generate_room(RoomSpec(n_chairs=0, n_tables=0, seed=3))
    Kc = CameraIntrinsics.default(80, 60)
    poses = [look_at([2.0, 1.2, 2.0], [2.0 + np.cos(a), 1.2, 2.0 + np.sin(a)])
             for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    tsdf = TsdfVolume.for_bounds(scene.bounds, 64)
    from semfuse.render import render_frame
    for p in poses:
        d, _ = render_frame(scene, Kc, p)
        tsdf.integrate(d / 1000.0, Kc, p)
    gt = fuse_ground_truth(scene, poses, Kc, tsdf)
    return scene, Kc, poses, tsdf, gt


def test_render_label_view_walls(wall_scene):
    scene, Kc, poses, tsdf, gt = wall_scene
    from semfuse.render import render_frame
    _, truth = render_frame(scene, Kc, poses[0])
    view = render_label_view(gt, tsdf, Kc, poses[0])
    both = (view != VOID_ID) & (truth != VOID_ID)
    assert both.mean() > 0.9
    assert (view[both] == truth[both]).mean() > 0.97


def test_render_label_view_empty_and_mismatch(wall_scene):
    scene, Kc, poses, tsdf, gt = wall_scene
    empty = LabelVolume.like(tsdf, gt.n_classes)
    assert (render_label_view(empty, tsdf, Kc, poses[0]) == VOID_ID).all()
    other = LabelVolume(tsdf.origin + 0.01, tsdf.voxel_size, tsdf.dims, gt.n_classes)
    with pytest.raises(GridMismatchError):
        render_label_view(other, tsdf, Kc, poses[0])


def test_ground_truth_unanimous_on_wall_interiors(wall_scene):
    scene, Kc, poses, tsdf, gt = wall_scene
    lab = gt.extract_labels()
    wall = lab == scene.taxonomy.id_of("wall")
    # voxels away from room edges see only wall pixels
    idx = np.argwhere(wall)
    c = tsdf.origin + (idx + 0.5) * tsdf.voxel_size
    interior = (c[:, 1] > 0.3) & (c[:, 1] < 2.2)
    u = unanimous(gt)[tuple(idx[interior].T)]
    assert u.mean() == 1.0


# -- metrics ---------------------------------------------------------------

def test_evaluate_identity_and_void(rng):
    t = rng.integers(0, 5, 1000).astype(np.uint8)
    t[:50] = VOID_ID
    m = evaluate(t, t, 5)
    assert m.accuracy == 1.0 and m.class_average_accuracy == 1.0 and m.n_samples == 950
    p = t.copy()
    p[50:60] = VOID_ID
    assert evaluate(p, t, 5).n_samples == 940


def test_evaluate_constant_prediction():
    t = np.array([0, 0, 1, 1], np.uint8)
    m = evaluate(np.zeros(4, np.uint8), t, 3)
    assert m.accuracy == 0.5
    assert m.per_class_accuracy == [1.0, 0.0, None]
    assert m.class_average_accuracy == 0.5
    assert m.confusion.tolist() == [[2, 0, 0], [2, 0, 0], [0, 0, 0]]


def test_evaluate_random_guessing():
    rng = np.random.default_rng(0)
    t = rng.integers(0, 5, 1_000_000).astype(np.uint8)
    p = rng.integers(0, 5, 1_000_000).astype(np.uint8)
    assert abs(evaluate(p, t, 5).accuracy - 0.2) < 0.01


def test_metrics_json_round_trip(rng):
    m = evaluate(rng.integers(0, 3, 100).astype(np.uint8), rng.integers(0, 3, 100).astype(np.uint8), 3)
    import json
    back = SegMetrics.from_dict(json.loads(m.to_json()))
    assert back.accuracy == m.accuracy and np.array_equal(back.confusion, m.confusion)


def test_evaluate_size_mismatch():
    with pytest.raises(ValueError):
        evaluate(np.zeros(3, np.uint8), np.zeros(4, np.uint8), 2)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_fusion_order_invariance(seed):
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(5):
        p = rng.dirichlet(np.ones(3), K.shape)
        d = rng.uniform(0.5, 1.9, K.shape)
        d[rng.random(K.shape) < 0.1] = 0
        frames.append((p, d))
    a, b = _vol(3), _vol(3)
    for p, d in frames:
        a.fuse_frame(p, d, K, POSE)
    for j in rng.permutation(5):
        b.fuse_frame(*frames[j], K, POSE)
    assert np.abs(a.log_probs - b.log_probs).max() < 1e-9
    assert np.array_equal(a.count, b.count)
    assert np.array_equal(a.extract_labels(), b.extract_labels())
