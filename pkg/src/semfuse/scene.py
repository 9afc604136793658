"""Labelled triangle-mesh scenes: OBJ ingestion, annotation mapping and a
procedural desk-scale room generator.

World frame convention: metres, +Y is up, the floor of generated rooms lies
on y = 0.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

VOID_ID = 255
DEGENERATE_AREA = 1e-12


class ObjParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class AnnotationError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class names; class ids are the list positions."""

    names: tuple[str, ...]
    void_id: int = VOID_ID

    def __post_init__(self):
        if not 0 < len(self.names) <= 15:
            raise ValueError(f"taxonomy must hold 1..15 classes, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise AnnotationError(f"unknown class name {name!r}") from None

    @property
    def classes(self) -> list[tuple[int, str]]:
        return list(enumerate(self.names))

    def to_text(self) -> str:
        return "".join(f"{i}\t{n}\n" for i, n in self.classes)

    @classmethod
    def from_text(cls, text: str) -> "ClassTaxonomy":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"taxonomy line {lineno}: expected 'id<TAB>name'")
            entries.append((int(parts[0]), parts[1].strip()))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError("taxonomy ids must be dense 0..K-1")
        return cls(tuple(n for _, n in entries))


# the five classes of the chairs-and-tables experiments
DEFAULT_TAXONOMY = ClassTaxonomy(("chair", "table", "floor", "ceiling", "wall"))


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (n, 3) float64, metres
    triangles: np.ndarray  # (m, 3) int64
    object_name: str

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError(f"mesh {self.object_name!r}: triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def aabb(self) -> np.ndarray:
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])


@dataclass(frozen=True, eq=False)
class Scene:
    meshes: tuple[Mesh, ...]
    labels: tuple[int, ...]
    taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY
    bounds: np.ndarray = field(default=None)  # (2, 3) min/max corners

    def __post_init__(self):
        object.__setattr__(self, "meshes", tuple(self.meshes))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if len(self.meshes) != len(self.labels):
            raise ValueError("one label per mesh required")
        for l in self.labels:
            if not 0 <= l < self.taxonomy.n_classes:
                raise ValueError(f"label {l} outside taxonomy")
        if self.meshes:
            allv = np.concatenate([m.vertices for m in self.meshes if len(m.vertices)] or [np.zeros((1, 3))])
            b = np.stack([allv.min(axis=0), allv.max(axis=0)])
        else:
            b = np.zeros((2, 3))
        b.setflags(write=False)
        object.__setattr__(self, "bounds", b)

    @property
    def n_triangles(self) -> int:
        return sum(len(m.triangles) for m in self.meshes)

    @cached_property
    def triangle_soup(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(T, 3, 3) vertex coordinates, per-triangle mesh index, per-triangle
        index within its mesh."""
        if not self.n_triangles:
            return np.zeros((0, 3, 3)), np.zeros(0, np.int32), np.zeros(0, np.int32)
        tris = np.concatenate([m.vertices[m.triangles] for m in self.meshes])
        mesh_idx = np.concatenate(
            [np.full(len(m.triangles), i, np.int32) for i, m in enumerate(self.meshes)])
        local = np.concatenate([np.arange(len(m.triangles), dtype=np.int32) for m in self.meshes])
        return tris, mesh_idx, local

    @cached_property
    def bvh(self):
        from .render import build_bvh
        tris, _, _ = self.triangle_soup
        return build_bvh(tris)

    def to_obj(self) -> str:
        out = io.StringIO()
        base = 1
        for m in self.meshes:
            out.write(f"o {m.object_name}\n")
            for x, y, z in m.vertices.tolist():
                out.write(f"v {x!r} {y!r} {z!r}\n")
            for a, b, c in (m.triangles + base).tolist():
                out.write(f"f {a} {b} {c}\n")
            base += len(m.vertices)
        return out.getvalue()

    def annotation_map(self) -> dict[str, str]:
        return {m.object_name: self.taxonomy.names[l] for m, l in zip(self.meshes, self.labels)}

    def save(self, directory: str | Path, stem: str = "scene") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.obj").write_text(self.to_obj())
        (d / f"{stem}.ann").write_text(write_annotations(self.annotation_map()))
        (d / "taxonomy.txt").write_text(self.taxonomy.to_text())

    @classmethod
    def load(cls, directory: str | Path, stem: str = "scene") -> "Scene":
        d = Path(directory)
        taxonomy = ClassTaxonomy.from_text((d / "taxonomy.txt").read_text())
        meshes = parse_obj((d / f"{stem}.obj").read_bytes())
        ann = read_annotations((d / f"{stem}.ann").read_text())
        return attach_labels(meshes, ann, taxonomy)


def _resolve_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(lineno, f"bad face index {token!r}") from None
    if idx > 0:
        idx -= 1
    elif idx < 0:
        idx += n_vertices
    else:
        raise ObjParseError(lineno, "face index 0 is invalid")
    if not 0 <= idx < n_vertices:
        raise ObjParseError(lineno, f"face index {head} out of range ({n_vertices} vertices)")
    return idx


def parse_obj(data: bytes | str) -> list[Mesh]:
    """Parse Wavefront OBJ text into one mesh per object/group.

    Supported records are ``v``, ``vn``, ``f``, ``o``, ``g`` and ``usemtl``;
    anything else is ignored. Polygons are fan-triangulated and normals are
    discarded. Triangles with area below 1e-12 m^2 are dropped with a warning.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    vertices: list[tuple[float, float, float]] = []
    groups: list[tuple[str, list[tuple[int, int, int]]]] = []
    current: list[tuple[int, int, int]] | None = None
    name = "default"

    for lineno, raw in enumerate(data.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ObjParseError(lineno, "vertex needs 3 coordinates")
            try:
                vertices.append((float(rest[0]), float(rest[1]), float(rest[2])))
            except ValueError:
                raise ObjParseError(lineno, f"non-numeric vertex coordinate in {line!r}") from None
        elif tag in ("o", "g"):
            name = " ".join(rest) if rest else "default"
            current = None
        elif tag == "f":
            if len(rest) < 3:
                raise ObjParseError(lineno, f"face with {len(rest)} vertices")
            idx = [_resolve_index(tok, len(vertices), lineno) for tok in rest]
            if current is None:
                current = []
                groups.append((name, current))
            for k in range(1, len(idx) - 1):
                current.append((idx[0], idx[k], idx[k + 1]))
        # vn, vt, usemtl, mtllib, s: grouping comes from o/g only

    allv = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    merged: dict[str, list[tuple[int, int, int]]] = {}
    for gname, faces in groups:
        merged.setdefault(gname, []).extend(faces)

    meshes = []
    dropped = 0
    for gname, faces in merged.items():
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        used, inverse = np.unique(f, return_inverse=True)
        mesh = Mesh(allv[used], inverse.reshape(-1, 3), gname)
        keep = mesh.triangle_areas() > DEGENERATE_AREA
        if not keep.all():
            dropped += int((~keep).sum())
            mesh = Mesh(mesh.vertices, mesh.triangles[keep], gname)
        if len(mesh.triangles):
            meshes.append(mesh)
    if dropped:
        logger.warning("dropped %d degenerate triangles", dropped)
    return meshes


def read_annotations(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise AnnotationError(f"annotation line {lineno}: expected 'object<TAB>class'")
        out[parts[0]] = parts[1].strip()
    return out


def write_annotations(mapping: Mapping[str, str]) -> str:
    return "".join(f"{k}\t{v}\n" for k, v in mapping.items())


def attach_labels(meshes: Sequence[Mesh], annotation_map: Mapping[str, str],
                  taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY) -> Scene:
    labels = []
    for m in meshes:
        if m.object_name not in annotation_map:
            raise AnnotationError(f"object {m.object_name!r} has no annotation")
        labels.append(taxonomy.id_of(annotation_map[m.object_name]))
    return Scene(tuple(meshes), tuple(labels), taxonomy)


# --- procedural rooms ------------------------------------------------------

@dataclass(frozen=True)
class RoomSpec:
    width: float = 4.0  # x extent
    depth: float = 4.0  # z extent
    height: float = 2.5  # y extent
    n_chairs: int = 0
    n_tables: int = 0
    seed: int = 0
    tessellation: int = 1  # each room quad is split into an n x n grid
    wall_clearance: float = 0.3
    max_retries: int = 2000

    def __post_init__(self):
        if min(self.width, self.depth, self.height) <= 0:
            raise ValueError("room extents must be positive")
        if self.n_chairs < 0 or self.n_tables < 0:
            raise ValueError("object counts must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if self.tessellation < 1:
            raise ValueError("tessellation must be >= 1")


_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],  # bottom
    [4, 5, 6], [4, 6, 7],  # top
    [0, 1, 5], [0, 5, 4],
    [1, 2, 6], [1, 6, 5],
    [2, 3, 7], [2, 7, 6],
    [3, 0, 4], [3, 4, 7],
])


def _box(lo, hi) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1],
                  [x0, y1, z0], [x1, y1, z0], [x1, y1, z1], [x0, y1, z1]], dtype=np.float64)
    return v, _BOX_FACES.copy()


def _merge(parts: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    vs, ts, base = [], [], 0
    for v, t in parts:
        vs.append(v)
        ts.append(t + base)
        base += len(v)
    return np.concatenate(vs), np.concatenate(ts)


def _grid_quad(origin, u, v, n) -> tuple[np.ndarray, np.ndarray]:
    s = np.linspace(0.0, 1.0, n + 1)
    a, b = np.meshgrid(s, s, indexing="ij")
    verts = (np.asarray(origin, float)[None]
             + a.reshape(-1, 1) * np.asarray(u, float)[None]
             + b.reshape(-1, 1) * np.asarray(v, float)[None])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    p00 = (i * (n + 1) + j).ravel()
    p10, p01, p11 = p00 + n + 1, p00 + 1, p00 + n + 2
    tris = np.concatenate([np.stack([p00, p10, p11], 1), np.stack([p00, p11, p01], 1)])
    return verts, tris


def _rotate_footprint(parts, yaw_quarter: int, centre_xz):
    """Rotate local furniture parts (centred at the origin in xz) by a multiple
    of 90 degrees about +Y and translate to centre_xz."""
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][yaw_quarter % 4]
    out = []
    for v, t in parts:
        x, z = v[:, 0].copy(), v[:, 2].copy()
        v = v.copy()
        v[:, 0] = c * x + s * z + centre_xz[0]
        v[:, 2] = -s * x + c * z + centre_xz[1]
        out.append((v, t))
    return out


def _table_parts(rng):
    w = rng.uniform(0.9, 1.4)
    d = rng.uniform(0.6, 0.9)
    top = 0.75
    th, leg = 0.04, 0.05
    parts = [_box((-w / 2, top - th, -d / 2), (w / 2, top, d / 2))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx, cz = sx * (w / 2 - leg), sz * (d / 2 - leg)
            parts.append(_box((cx - leg / 2, 0.0, cz - leg / 2), (cx + leg / 2, top - th, cz + leg / 2)))
    return parts, (w, d)


def _chair_parts(rng):
    w = rng.uniform(0.42, 0.5)
    seat = 0.45
    th, leg = 0.04, 0.04
    back_h = rng.uniform(0.4, 0.5)
    parts = [_box((-w / 2, seat - th, -w / 2), (w / 2, seat, w / 2))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx, cz = sx * (w / 2 - leg), sz * (w / 2 - leg)
            parts.append(_box((cx - leg / 2, 0.0, cz - leg / 2), (cx + leg / 2, seat - th, cz + leg / 2)))
    parts.append(_box((-w / 2, seat, w / 2 - th), (w / 2, seat + back_h, w / 2)))
    return parts, (w, w)


def generate_room(spec: RoomSpec, taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY) -> Scene:
    """Build a closed box room with tables and chairs placed by rejection
    sampling; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    W, D, H, n = spec.width, spec.depth, spec.height, spec.tessellation
    meshes, labels = [], []

    def add(name, parts_or_vt, cls):
        v, t = parts_or_vt
        meshes.append(Mesh(v, t, name))
        labels.append(taxonomy.id_of(cls))

    add("floor", _grid_quad((0, 0, 0), (W, 0, 0), (0, 0, D), n), "floor")
    add("ceiling", _grid_quad((0, H, 0), (W, 0, 0), (0, 0, D), n), "ceiling")
    add("wall_0", _grid_quad((0, 0, 0), (0, 0, D), (0, H, 0), n), "wall")
    add("wall_1", _grid_quad((W, 0, 0), (0, 0, D), (0, H, 0), n), "wall")
    add("wall_2", _grid_quad((0, 0, 0), (W, 0, 0), (0, H, 0), n), "wall")
    add("wall_3", _grid_quad((0, 0, D), (W, 0, 0), (0, H, 0), n), "wall")

    placed: list[np.ndarray] = []  # footprints [xmin, zmin, xmax, zmax]
    gap = 0.05
    todo = [("table", i) for i in range(spec.n_tables)] + [("chair", i) for i in range(spec.n_chairs)]
    for kind, i in todo:
        parts, (fw, fd) = (_table_parts if kind == "table" else _chair_parts)(rng)
        yaw = int(rng.integers(4))
        half = np.array([fw, fd]) / 2 if yaw % 2 == 0 else np.array([fd, fw]) / 2
        lo = np.array([spec.wall_clearance, spec.wall_clearance]) + half
        hi = np.array([W, D]) - spec.wall_clearance - half
        if np.any(hi < lo):
            raise PlacementError(f"room too small to place {kind} {i}")
        for _ in range(spec.max_retries):
            c = rng.uniform(lo, hi)
            fp = np.concatenate([c - half, c + half])
            if all(fp[0] >= q[2] + gap or q[0] >= fp[2] + gap or fp[1] >= q[3] + gap or q[1] >= fp[3] + gap
                   for q in placed):
                placed.append(fp)
                add(f"{kind}_{i:02d}", _merge(_rotate_footprint(parts, yaw, c)), kind)
                break
        else:
            raise PlacementError(f"could not place {kind} {i} after {spec.max_retries} tries")
    return Scene(tuple(meshes), tuple(labels), taxonomy)
