"""CPU ray tracer for depth + annotation images.

Triangles are held in a flat bounding-volume hierarchy (median split on the
longest centroid axis, leaves of at most 4 triangles). Ties between equal
hit distances resolve to the lowest triangle index, so results do not depend
on how the hierarchy was built.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .camera import CameraIntrinsics, Pose
from .scene import VOID_ID, Scene

T_EPSILON = 1e-6
DET_EPSILON = 1e-14
LEAF_SIZE = 4


@dataclass(frozen=True, eq=False)
class BVH:
    node_min: np.ndarray  # (M, 3)
    node_max: np.ndarray
    node_left: np.ndarray  # child index, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray  # first slot in `order` for leaves
    node_count: np.ndarray
    order: np.ndarray  # slot -> original triangle index
    v0: np.ndarray  # (T, 3) in slot order
    e1: np.ndarray
    e2: np.ndarray

    @property
    def n_triangles(self) -> int:
        return len(self.order)


@njit(cache=True)
def _build(tri_min, tri_max, centroid, leaf_size):
    n = centroid.shape[0]
    order = np.arange(n)
    cap = max(1, 2 * n)
    nmin = np.empty((cap, 3))
    nmax = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    if n == 0:
        return nmin[:0], nmax[:0], left[:0], right[:0], start[:0], count[:0], order
    stack = np.empty((cap, 3), np.int64)  # node, begin, end
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node, b, e = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for s in range(b, e):
            t = order[s]
            for k in range(3):
                lo[k] = min(lo[k], tri_min[t, k])
                hi[k] = max(hi[k], tri_max[t, k])
                clo[k] = min(clo[k], centroid[t, k])
                chi[k] = max(chi[k], centroid[t, k])
        nmin[node] = lo
        nmax[node] = hi
        if e - b <= leaf_size:
            start[node] = b
            count[node] = e - b
            continue
        axis = 0
        ext = chi - clo
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        seg = order[b:e].copy()
        keys = centroid[seg, axis]
        perm = np.argsort(keys, kind="mergesort")
        order[b:e] = seg[perm]
        mid = b + (e - b) // 2
        l, r = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node] = l
        right[node] = r
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = r, mid, e
        sp += 1
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = l, b, mid
        sp += 1
    return (nmin[:n_nodes], nmax[:n_nodes], left[:n_nodes], right[:n_nodes],
            start[:n_nodes], count[:n_nodes], order)


def build_bvh(triangles: np.ndarray) -> BVH:
    tris = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    parts = _build(tris.min(axis=1), tris.max(axis=1), tris.mean(axis=1), LEAF_SIZE)
    order = parts[-1]
    t = tris[order]
    return BVH(*parts[:-1], order,
               np.ascontiguousarray(t[:, 0]),
               np.ascontiguousarray(t[:, 1] - t[:, 0]),
               np.ascontiguousarray(t[:, 2] - t[:, 0]))


@njit(cache=True)
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, i):
    """Möller–Trumbore; returns t or inf."""
    px = dy * e2[i, 2] - dz * e2[i, 1]
    py = dz * e2[i, 0] - dx * e2[i, 2]
    pz = dx * e2[i, 1] - dy * e2[i, 0]
    det = e1[i, 0] * px + e1[i, 1] * py + e1[i, 2] * pz
    if abs(det) < DET_EPSILON:
        return np.inf
    inv = 1.0 / det
    sx = ox - v0[i, 0]
    sy = oy - v0[i, 1]
    sz = oz - v0[i, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1[i, 2] - sz * e1[i, 1]
    qy = sz * e1[i, 0] - sx * e1[i, 2]
    qz = sx * e1[i, 1] - sy * e1[i, 0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2[i, 0] * qx + e2[i, 1] * qy + e2[i, 2] * qz) * inv
    if t > T_EPSILON:
        return t
    return np.inf


@njit(cache=True)
def _box_entry(ox, oy, oz, idx, idy, idz, bmin, bmax, j):
    t0 = 0.0
    t1 = np.inf
    a = (bmin[j, 0] - ox) * idx
    b = (bmax[j, 0] - ox) * idx
    if a > b:
        a, b = b, a
    t0 = max(t0, a)
    t1 = min(t1, b)
    a = (bmin[j, 1] - oy) * idy
    b = (bmax[j, 1] - oy) * idy
    if a > b:
        a, b = b, a
    t0 = max(t0, a)
    t1 = min(t1, b)
    a = (bmin[j, 2] - oz) * idz
    b = (bmax[j, 2] - oz) * idz
    if a > b:
        a, b = b, a
    t0 = max(t0, a)
    t1 = min(t1, b)
    if t0 <= t1:
        return t0
    return np.inf


@njit(cache=True)
def _trace(ox, oy, oz, dx, dy, dz, nmin, nmax, left, right, start, count, order, v0, e1, e2, stack):
    best_t = np.inf
    best_i = -1
    if nmin.shape[0] == 0:
        return best_t, best_i
    idx = 1.0 / dx if dx != 0.0 else np.inf
    idy = 1.0 / dy if dy != 0.0 else np.inf
    idz = 1.0 / dz if dz != 0.0 else np.inf
    # nan from 0 * inf in the slab test is avoided by nudging exact zeros
    if dx == 0.0:
        idx = 1e300
    if dy == 0.0:
        idy = 1e300
    if dz == 0.0:
        idz = 1e300
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        te = _box_entry(ox, oy, oz, idx, idy, idz, nmin, nmax, node)
        if te == np.inf or te > best_t:
            continue
        if left[node] < 0:
            for s in range(start[node], start[node] + count[node]):
                t = _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, s)
                if t < best_t or (t == best_t and t < np.inf and order[s] < best_i):
                    best_t = t
                    best_i = order[s]
        else:
            l, r = left[node], right[node]
            tl = _box_entry(ox, oy, oz, idx, idy, idz, nmin, nmax, l)
            tr = _box_entry(ox, oy, oz, idx, idy, idz, nmin, nmax, r)
            # push the farther child first so the nearer is popped next
            if tl <= tr:
                if tr < np.inf and tr <= best_t:
                    stack[sp] = r
                    sp += 1
                if tl < np.inf and tl <= best_t:
                    stack[sp] = l
                    sp += 1
            else:
                if tl < np.inf and tl <= best_t:
                    stack[sp] = l
                    sp += 1
                if tr < np.inf and tr <= best_t:
                    stack[sp] = r
                    sp += 1
    return best_t, best_i


@njit(cache=True)
def _trace_many(origins, dirs, nmin, nmax, left, right, start, count, order, v0, e1, e2):
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    i_out = np.full(n, -1, np.int64)
    for k in range(n):
        stack = np.empty(128, np.int64)
        t, i = _trace(origins[k, 0], origins[k, 1], origins[k, 2], dirs[k, 0], dirs[k, 1], dirs[k, 2],
                      nmin, nmax, left, right, start, count, order, v0, e1, e2, stack)
        t_out[k] = t
        i_out[k] = i
    return t_out, i_out


@njit(cache=True)
def _render_kernel(R, c, fx, fy, cx, cy, width, height,
                   nmin, nmax, left, right, start, count, order, v0, e1, e2, z_out, tri_out):
    for v in range(height):
        stack = np.empty(128, np.int64)
        for u in range(width):
            x = (u - cx) / fx
            y = (v - cy) / fy
            norm = np.sqrt(x * x + y * y + 1.0)
            x /= norm
            y /= norm
            z = 1.0 / norm
            dx = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z
            dy = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z
            dz = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z
            t, i = _trace(c[0], c[1], c[2], dx, dy, dz, nmin, nmax, left, right, start, count,
                          order, v0, e1, e2, stack)
            if i >= 0:
                z_out[v, u] = t * z
                tri_out[v, u] = i
            else:
                z_out[v, u] = 0.0
                tri_out[v, u] = -1


def _bvh_args(b: BVH):
    return (b.node_min, b.node_max, b.node_left, b.node_right, b.node_start, b.node_count,
            b.order, b.v0, b.e1, b.e2)


def flat_bvh(triangles: np.ndarray) -> BVH:
    """A single-leaf 'hierarchy' that tests every triangle; the brute-force
    reference for acceleration-transparency checks."""
    tris = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    n = len(tris)
    if n == 0:
        return build_bvh(tris)
    return BVH(tris.min(axis=(0, 1))[None], tris.max(axis=(0, 1))[None],
               np.array([-1]), np.array([-1]), np.array([0]), np.array([n]),
               np.arange(n), np.ascontiguousarray(tris[:, 0]),
               np.ascontiguousarray(tris[:, 1] - tris[:, 0]),
               np.ascontiguousarray(tris[:, 2] - tris[:, 0]))


def intersect_rays(bvh: BVH, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit per ray: (t, triangle index), t = inf / index -1 for misses."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.broadcast_to(o, d.shape).copy() if len(o) == 1 else o
    return _trace_many(o, d, *_bvh_args(bvh))


@dataclass(frozen=True)
class Hit:
    t: float
    mesh_index: int
    triangle_index: int


def intersect(origin, direction, scene: Scene) -> Hit | None:
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    t, i = intersect_rays(scene.bvh, np.asarray(origin, dtype=np.float64)[None], direction[None])
    if i[0] < 0:
        return None
    _, mesh_idx, local = scene.triangle_soup
    return Hit(float(t[0]), int(mesh_idx[i[0]]), int(local[i[0]]))


def render_raw(scene: Scene, intrinsics: CameraIntrinsics, pose: Pose,
               accelerate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Unquantised camera-Z depth in metres (0 on misses) and the global
    triangle index per pixel (-1 on misses)."""
    tris, _, _ = scene.triangle_soup
    bvh = scene.bvh if accelerate else flat_bvh(tris)
    h, w = intrinsics.height, intrinsics.width
    z = np.empty((h, w))
    tri = np.empty((h, w), np.int64)
    _render_kernel(pose.rotation, pose.translation, float(intrinsics.fx), float(intrinsics.fy),
                   float(intrinsics.cx), float(intrinsics.cy), w, h, *_bvh_args(bvh), z, tri)
    return z, tri


def quantize_depth(z_m: np.ndarray) -> np.ndarray:
    """Metres -> uint16 millimetres, rounding half up; out-of-range -> 0."""
    mm = np.floor(np.asarray(z_m) * 1000.0 + 0.5)
    mm[(mm < 1) | (mm > 65535) | ~np.isfinite(mm)] = 0
    return mm.astype(np.uint16)


def labels_from_triangles(scene: Scene, tri: np.ndarray) -> np.ndarray:
    _, mesh_idx, _ = scene.triangle_soup
    lut = np.asarray(scene.labels, dtype=np.uint8)
    out = np.full(tri.shape, VOID_ID, np.uint8)
    hit = tri >= 0
    out[hit] = lut[mesh_idx[tri[hit]]]
    return out


def render_frame(scene: Scene, intrinsics: CameraIntrinsics, pose: Pose,
                 accelerate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Depth (uint16 mm, 0 = no hit) and label (uint8, 255 = void) images."""
    z, tri = render_raw(scene, intrinsics, pose, accelerate)
    depth = quantize_depth(z)
    labels = labels_from_triangles(scene, tri)
    labels[depth == 0] = VOID_ID
    return depth, labels
