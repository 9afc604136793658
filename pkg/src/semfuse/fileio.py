"""On-disk formats for frames: binary PGM depth/label rasters and pose text files."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, Pose


class FormatError(ValueError):
    pass


FRAME_PATTERN = "frame_{:05d}"


def frame_paths(directory: str | Path, index: int) -> dict[str, Path]:
    stem = Path(directory) / FRAME_PATTERN.format(index)
    return {"depth": stem.with_name(stem.name + ".depth.pgm"),
            "label": stem.with_name(stem.name + ".label.pgm"),
            "pose": stem.with_name(stem.name + ".pose.txt")}


def list_frames(directory: str | Path) -> list[int]:
    pat = re.compile(r"frame_(\d{5})\.pose\.txt$")
    out = []
    for p in Path(directory).iterdir():
        m = pat.match(p.name)
        if m:
            out.append(int(m.group(1)))
    return sorted(out)


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM needs a 2-D raster")
    if image.dtype == np.uint8:
        maxval, payload = 255, image.tobytes()
    elif image.dtype == np.uint16:
        maxval, payload = 65535, image.astype(">u2").tobytes()
    else:
        raise ValueError(f"unsupported PGM dtype {image.dtype}")
    h, w = image.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + payload


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (bad magic)")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError("corrupt PGM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError("corrupt PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * dtype.itemsize
    payload = data[pos:pos + n]
    if len(payload) != n:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {n} bytes")
    img = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def _fmt(x: float) -> str:
    return "%.17g" % x


def format_pose(pose: Pose, intrinsics: CameraIntrinsics | None = None) -> str:
    lines = []
    if intrinsics is not None:
        i = intrinsics
        lines.append(" ".join([_fmt(i.fx), _fmt(i.fy), _fmt(i.cx), _fmt(i.cy), str(i.width), str(i.height)]))
    for row in pose.matrix3x4:
        lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_pose(text: str) -> tuple[Pose, CameraIntrinsics | None]:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    intr = None
    if len(rows) == 4:
        h = rows.pop(0)
        if len(h) != 6:
            raise FormatError("intrinsics header needs 'fx fy cx cy width height'")
        try:
            intr = CameraIntrinsics(float(h[0]), float(h[1]), float(h[2]), float(h[3]), int(h[4]), int(h[5]))
        except ValueError as e:
            raise FormatError(f"bad intrinsics header: {e}") from None
    if len(rows) != 3 or any(len(r) != 4 for r in rows):
        raise FormatError("pose file needs 3 rows of 4 numbers")
    try:
        m = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        raise FormatError("non-numeric pose entry") from None
    return Pose.from_matrix(np.vstack([m, [0, 0, 0, 1]])), intr


def write_pose(path: str | Path, pose: Pose, intrinsics: CameraIntrinsics | None = None) -> None:
    Path(path).write_text(format_pose(pose, intrinsics))


def read_pose(path: str | Path) -> tuple[Pose, CameraIntrinsics | None]:
    return parse_pose(Path(path).read_text())


def write_frame(directory, index, depth, labels, pose, intrinsics) -> None:
    p = frame_paths(directory, index)
    write_pgm(p["depth"], depth)
    write_pgm(p["label"], labels)
    write_pose(p["pose"], pose, intrinsics)


def read_frame(directory, index):
    """(depth uint16 mm, labels uint8 or None, pose, intrinsics)."""
    p = frame_paths(directory, index)
    pose, intr = read_pose(p["pose"])
    depth = read_pgm(p["depth"])
    labels = read_pgm(p["label"]) if p["label"].exists() else None
    return depth, labels, pose, intr
