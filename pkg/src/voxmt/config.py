"""Pipeline configuration: built-in profiles and the flat ``key = value`` file format.

Example file::

    # start from a profile, then override keys
    profile = toy
    encoder_width = 4, 8, 16, 32
    score_thresh = 0.2

Lists are comma separated. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

from voxmt.errors import ConfigError
from voxmt.voxelizer import VoxelConfig


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "waymo"
    # voxelization
    voxel_size: Tuple[float, ...] = (0.1, 0.1, 0.15)
    range_xy: Tuple[float, ...] = (-75.2, 75.2)
    range_z: Tuple[float, ...] = (-2.0, 4.0)
    # network
    vfe_features: int = 16
    downsampling: int = 8
    encoder_depth: Tuple[int, ...] = (2, 3, 3, 3)
    encoder_width: Tuple[int, ...] = (32, 64, 128, 256)
    decoder_width: Tuple[int, ...] = (128, 64, 32, 32)
    gcp_depth: Tuple[int, ...] = (6, 6)
    gcp_width: Tuple[int, ...] = (128, 256)
    gcp_out_width: int = 256
    gcp_mode: str = "full"
    stage2_hidden: int = 64
    # classes
    num_classes: int = 6
    thing_classes: Tuple[int, ...] = (3, 4, 5)
    fallback_class: int = 0
    # decoding
    max_boxes: int = 50
    score_thresh: float = 0.1
    iou_alpha: float = 0.5

    def __post_init__(self):
        self.validate()

    @property
    def voxel(self) -> VoxelConfig:
        lo, hi = self.range_xy
        zlo, zhi = self.range_z
        try:
            return VoxelConfig((lo, lo, zlo), (hi, hi, zhi), tuple(self.voxel_size))
        except ConfigError as exc:
            raise ConfigError(f"voxel_size/range_xy/range_z: {exc}") from None

    @property
    def grid_dims(self) -> Tuple[int, int, int]:
        return self.voxel.grid_dims

    @property
    def bottom_dims(self) -> Tuple[int, int, int]:
        d = self.downsampling
        return tuple(-(-n // d) for n in self.grid_dims)

    @property
    def bev_channels_in(self) -> int:
        """Channels of the packed BEV map: bottom width times stride-8 height."""
        return self.encoder_width[-1] * self.bottom_dims[2]

    @property
    def bev_channels_out(self) -> int:
        if self.gcp_mode == "identity":
            return self.bev_channels_in
        return sum(self.gcp_width[: len([d for d in self.gcp_depth if d > 0])])

    @property
    def bridge_width(self) -> int:
        return self.encoder_width[-1] if self.gcp_mode == "identity" else self.gcp_out_width

    @property
    def num_thing(self) -> int:
        return len(self.thing_classes)

    @property
    def stuff_classes(self) -> Tuple[int, ...]:
        return tuple(c for c in range(self.num_classes) if c not in self.thing_classes)

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        need(len(self.voxel_size) == 3, "voxel_size", "needs 3 values")
        need(len(self.range_xy) == 2, "range_xy", "needs 2 values")
        need(len(self.range_z) == 2, "range_z", "needs 2 values")
        self.voxel  # raises on non-integral grids
        stages = len(self.encoder_width)
        need(stages >= 1, "encoder_width", "needs at least one stage")
        need(len(self.encoder_depth) == stages, "encoder_depth", f"needs {stages} values to match encoder_width")
        need(len(self.decoder_width) == stages, "decoder_width", f"needs {stages} values to match encoder_width")
        need(all(d >= 1 for d in self.encoder_depth), "encoder_depth", "every stage needs at least one layer")
        need(
            self.downsampling == 2 ** (stages - 1),
            "downsampling",
            f"{self.downsampling} inconsistent with {stages} encoder stages (expected {2 ** (stages - 1)})",
        )
        need(self.downsampling in (1, 2, 4, 8), "downsampling", "must be 1, 2, 4 or 8")
        for key in ("encoder_width", "decoder_width", "gcp_width"):
            need(all(v > 0 for v in getattr(self, key)), key, "widths must be positive")
        need(self.vfe_features > 0, "vfe_features", "must be positive")
        need(self.gcp_mode in ("full", "identity"), "gcp_mode", "must be 'full' or 'identity'")
        need(len(self.gcp_depth) == 2 and len(self.gcp_width) == 2, "gcp_depth", "two GCP levels expected")
        need(self.gcp_depth[0] >= 1 and self.gcp_depth[1] >= 0, "gcp_depth", "level 1 needs at least one layer")
        need(self.gcp_out_width > 0, "gcp_out_width", "must be positive")
        need(self.stage2_hidden > 0, "stage2_hidden", "must be positive")
        need(self.num_classes >= 2, "num_classes", "needs at least two classes")
        need(
            len(set(self.thing_classes)) == len(self.thing_classes)
            and all(0 <= c < self.num_classes for c in self.thing_classes),
            "thing_classes",
            f"must be distinct ids in [0, {self.num_classes})",
        )
        need(0 <= self.fallback_class < self.num_classes, "fallback_class", f"outside [0, {self.num_classes})")
        need(self.max_boxes >= 0, "max_boxes", "must be non-negative")
        need(0.0 <= self.iou_alpha <= 1.0, "iou_alpha", "must lie in [0, 1]")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


PROFILES: Dict[str, PipelineConfig] = {
    "waymo": PipelineConfig(),
    "nuscenes": PipelineConfig(
        profile="nuscenes", voxel_size=(0.075, 0.075, 0.2), range_xy=(-54.0, 54.0), range_z=(-5.0, 3.0)
    ),
    # widths / 8 and a 32 x 32 x 16 grid
    "toy": PipelineConfig(
        profile="toy",
        voxel_size=(1.0, 1.0, 0.375),
        range_xy=(-16.0, 16.0),
        range_z=(-2.0, 4.0),
        vfe_features=2,
        encoder_width=(4, 8, 16, 32),
        decoder_width=(16, 8, 4, 4),
        gcp_width=(16, 32),
        gcp_out_width=32,
        stage2_hidden=8,
    ),
}

_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _convert(name: str, raw: str):
    default = getattr(PROFILES["waymo"], name)
    try:
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = float if isinstance(default[0], float) else int
            return tuple(kind(s) for s in items)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw
    profile = values.pop("profile", "waymo")
    if profile not in PROFILES:
        raise ConfigError(f"{source}: profile: unknown profile {profile!r} (choose from {sorted(PROFILES)})")
    changes = {k: _convert(k, v) for k, v in values.items()}
    try:
        return PROFILES[profile].replace(**changes)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path_or_profile) -> PipelineConfig:
    """Read a config file, or return a built-in profile when given its name."""
    if str(path_or_profile) in PROFILES:
        return PROFILES[str(path_or_profile)]
    path = Path(path_or_profile)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found and not a profile name ({sorted(PROFILES)})")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
