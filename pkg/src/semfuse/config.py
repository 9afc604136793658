"""Plain-text ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .segnet import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # camera and sequence
    image_width: int = 160
    image_height: int = 120
    n_frames: int = 30
    trajectory: str = "orbit"  # orbit | random
    # room generator; negative counts pick 1-2 tables and 2-4 chairs from the seed
    room_width: float = 4.0
    room_depth: float = 4.0
    room_height: float = 2.5
    n_chairs: int = -1
    n_tables: int = -1
    tessellation: int = 1
    # reconstruction
    grid_dims: int = 128
    pose_source: str = "gt"  # gt | icp
    # network
    layers: int = 4
    hidden: int = 32
    kernel: int = 7
    classes: int = 5
    scales: str = "4,3,2,1"
    epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 256

    def __post_init__(self):
        if self.trajectory not in ("orbit", "random"):
            raise ConfigError(f"trajectory must be orbit or random, got {self.trajectory!r}")
        if self.pose_source not in ("gt", "icp"):
            raise ConfigError(f"pose_source must be gt or icp, got {self.pose_source!r}")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.image_width < 8 or self.image_height < 8:
            raise ConfigError("image is too small")
        if self.grid_dims < 8:
            raise ConfigError("grid_dims must be >= 8")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        try:
            scales = tuple(int(s) for s in self.scales.split(","))
        except ValueError:
            raise ConfigError(f"bad scales list {self.scales!r}") from None
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed,
                           self.layers, self.hidden, self.kernel, self.classes, scales)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _coerce(types[key], val, key, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, seed=seed)


def _coerce(typ: str, val: str, key: str, lineno: int):
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {typ}, got {val!r}") from None
    return val
