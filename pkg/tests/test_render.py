import numpy as np
import pytest
from hypothesis import given, strategies as st

from semfuse.camera import CameraIntrinsics, Pose, look_at
from semfuse.render import build_bvh, flat_bvh, intersect, intersect_rays, render_frame, render_raw
from semfuse.scene import VOID_ID, Mesh, Scene


def _scene(tris, labels=None):
    meshes = [Mesh(np.asarray(t, float), [[0, 1, 2]], f"m{i}") for i, t in enumerate(tris)]
    return Scene(tuple(meshes), tuple(labels or [4] * len(meshes)))


def _oracle(o, d, tri):
    """Plane intersection followed by a barycentric inside test."""
    a, b, c = tri
    n = np.cross(b - a, c - a)
    den = n @ d
    if abs(den) < 1e-15:
        return np.inf
    t = n @ (a - o) / den
    if t <= 1e-6:
        return np.inf
    p = o + t * d
    v0, v1, v2 = b - a, c - a, p - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return t if (v >= 0 and w >= 0 and v + w <= 1) else np.inf


def test_plane_hit():
    s = _scene([[(-1, -1, 2), (1, -1, 2), (0, 1, 2)]])
    h = intersect((0, 0, 0), (0, 0, 1), s)
    assert h.t == pytest.approx(2.0, abs=1e-12)
    assert (h.mesh_index, h.triangle_index) == (0, 0)


def test_parallel_ray_misses():
    s = _scene([[(-1, -1, 2), (1, -1, 2), (0, 1, 2)]])
    assert intersect((0, 0, 0), (1, 0, 0), s) is None


def test_non_unit_direction_rejected():
    s = _scene([[(-1, -1, 2), (1, -1, 2), (0, 1, 2)]])
    with pytest.raises(ValueError):
        intersect((0, 0, 0), (0, 0, 2), s)


def test_random_rays_against_barycentric_oracle(rng):
    n = 10_000
    tris = rng.uniform(-1, 1, (n, 3, 3))
    o = rng.uniform(-2, 2, (n, 3))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    agree = 0
    for k in range(n):
        t, i = intersect_rays(build_bvh(tris[k:k + 1]), o[k:k + 1], d[k:k + 1])
        ref = _oracle(o[k], d[k], tris[k])
        if np.isinf(ref):
            agree += i[0] < 0
        else:
            agree += i[0] == 0 and abs(t[0] - ref) < 1e-9
    # grazing edge cases may legitimately differ between the two methods
    assert agree >= n - 2


def test_bvh_matches_exhaustive(rng):
    tris = rng.uniform(-3, 3, (500, 3, 3))
    o = rng.uniform(-4, 4, (2000, 3))
    d = rng.standard_normal((2000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t1, i1 = intersect_rays(build_bvh(tris), o, d)
    t2, i2 = intersect_rays(flat_bvh(tris), o, d)
    assert np.array_equal(i1, i2) and np.array_equal(t1, t2)
    # nothing strictly closer than the reported hit
    for k in range(0, 2000, 50):
        ref = min(_oracle(o[k], d[k], tri) for tri in tris)
        assert ref >= t1[k] - 1e-9


def test_bvh_independent_of_triangle_order(rng):
    tris = rng.uniform(-3, 3, (300, 3, 3))
    perm = rng.permutation(300)
    o = np.zeros((500, 3))
    d = rng.standard_normal((500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t1, i1 = intersect_rays(build_bvh(tris), o, d)
    t2, i2 = intersect_rays(build_bvh(tris[perm]), o, d)
    assert np.array_equal(t1, t2)
    hit = i1 >= 0
    assert np.array_equal(i1[hit], perm[i2[hit]])


def test_wall_at_two_metres():
    wall = Mesh(np.array([[-5, -5, 2], [5, -5, 2], [5, 5, 2], [-5, 5, 2.0]]), [[0, 1, 2], [0, 2, 3]], "w")
    s = Scene((wall,), (4,))
    K = CameraIntrinsics.default(64, 48)
    d, l = render_frame(s, K, Pose.identity())
    assert np.all(d == 2000) and np.all(l == 4)


def test_empty_scene():
    s = Scene((), ())
    K = CameraIntrinsics.default(32, 24)
    d, l = render_frame(s, K, Pose.identity())
    assert not d.any() and np.all(l == VOID_ID)


def test_room_depth_matches_analytic_planes(room):
    K = CameraIntrinsics.default(160, 120)
    pose = look_at([2.0, 1.4, 1.0], [2.2, 1.0, 3.5])
    z, tri = render_raw(room, K, pose)
    d, labels = render_frame(room, K, pose)
    rays = K.pixel_rays() @ pose.rotation.T
    o = pose.translation
    # distance along each ray to the six room planes; furniture-free pixels
    # see the nearest room plane in front of the camera
    planes = [(1, 0.0), (1, 2.5), (0, 0.0), (0, 4.0), (2, 0.0), (2, 4.0)]
    best = np.full(K.shape, np.inf)
    for axis, off in planes:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (off - o[axis]) / rays[..., axis]
        t[t <= 0] = np.inf
        best = np.minimum(best, t)
    room_px = np.isin(labels, [2, 3, 4])
    assert room_px.sum() > 1000
    assert np.abs(d[room_px] - best[room_px] * 1000).max() <= 0.5 + 1e-6


def test_render_transparency_and_invariants(room):
    K = CameraIntrinsics.default(80, 60)
    pose = look_at([1.0, 1.5, 1.0], [3.0, 0.5, 3.0])
    a = render_frame(room, K, pose)
    b = render_frame(room, K, pose, accelerate=False)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    d, l = a
    assert np.array_equal(d == 0, l == VOID_ID)
    assert np.all(l[l != VOID_ID] < room.taxonomy.n_classes)


@given(st.floats(0.5, 3.5), st.floats(0.3, 2.2), st.floats(0.5, 3.5), st.floats(0, 2 * np.pi))
def test_render_deterministic(x, y, z, yaw):
    from semfuse.scene import RoomSpec, generate_room
    s = generate_room(RoomSpec(n_chairs=1, n_tables=1, seed=3))
    K = CameraIntrinsics.default(32, 24)
    pose = look_at([x, y, z], [x + np.cos(yaw), y - 0.2, z + np.sin(yaw)])
    a = render_frame(s, K, pose)
    b = render_frame(s, K, pose)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
