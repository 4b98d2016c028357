"""Point clouds, voxelization, the voxel feature encoder and de-voxelization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from voxmt.errors import ConfigError, InputError, InternalError
from voxmt.sparse import SparseTensor, coord_keys

OUT_OF_RANGE = -1
NUM_POINT_FEATURES = 11


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``(N, 5)`` array of ``x, y, z, intensity, dt`` rows.

    ``dt`` is the sweep time offset in seconds: 0 for the current sweep,
    negative for merged past sweeps.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, 5)
        if data.ndim != 2 or data.shape[1] != 5:
            raise InputError(f"point array must be (N, 5), got {data.shape}")
        bad_dt = np.flatnonzero(data[:, 4] > 0)
        if len(bad_dt):
            raise InputError(f"point {int(bad_dt[0])} has dt > 0; only past sweeps may be merged")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_arrays(cls, xyz, intensity=None, dt=None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        inten = np.zeros(n) if intensity is None else np.asarray(intensity, dtype=np.float64)
        dts = np.zeros(n) if dt is None else np.asarray(dt, dtype=np.float64)
        return cls(np.column_stack([xyz, inten, dts]))

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    @property
    def dt(self) -> np.ndarray:
        return self.data[:, 4]

    @property
    def current_mask(self) -> np.ndarray:
        """Points of the current sweep; past-sweep points are excluded from losses and metrics."""
        return self.data[:, 4] == 0

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        data = self.data.copy()
        data[:, :3] = xyz
        return PointCloud(data)


@dataclass(frozen=True)
class VoxelConfig:
    range_min: Tuple[float, float, float]
    range_max: Tuple[float, float, float]
    voxel_size: Tuple[float, float, float]

    def __post_init__(self):
        for name in ("range_min", "range_max", "voxel_size"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3 or not all(math.isfinite(v) for v in value):
                raise ConfigError(f"{name} must be three finite numbers, got {value}")
            object.__setattr__(self, name, value)
        if any(s <= 0 for s in self.voxel_size):
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(hi <= lo for lo, hi in zip(self.range_min, self.range_max)):
            raise ConfigError(f"range_max {self.range_max} must exceed range_min {self.range_min}")
        for axis, (lo, hi, s) in enumerate(zip(self.range_min, self.range_max, self.voxel_size)):
            cells = (hi - lo) / s
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigError(
                    f"axis {'xyz'[axis]}: range {hi - lo} is not a multiple of voxel size {s}"
                )

    @property
    def grid_dims(self) -> Tuple[int, int, int]:
        """Voxel counts ``(W, H, D)`` along x, y, z."""
        return tuple(
            int(round((hi - lo) / s)) for lo, hi, s in zip(self.range_min, self.range_max, self.voxel_size)
        )

    def voxel_centers(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        return np.asarray(self.range_min) + (coords + 0.5) * np.asarray(self.voxel_size)


@dataclass(frozen=True, eq=False)
class PointVoxelMap:
    """Point -> voxel assignment.

    ``point_to_voxel[i]`` is a row of ``voxel_coords`` or ``OUT_OF_RANGE``.
    Point lists are stored CSR-style: the points of voxel ``v`` are
    ``point_order[offsets[v]:offsets[v + 1]]`` in ascending index order.
    """

    point_to_voxel: np.ndarray
    voxel_coords: np.ndarray
    point_order: np.ndarray
    offsets: np.ndarray
    grid_dims: Tuple[int, int, int]

    @property
    def num_voxels(self) -> int:
        return self.voxel_coords.shape[0]

    @property
    def in_range(self) -> np.ndarray:
        return self.point_to_voxel != OUT_OF_RANGE

    @property
    def voxel_point_lists(self) -> List[np.ndarray]:
        return [self.point_order[self.offsets[v] : self.offsets[v + 1]] for v in range(self.num_voxels)]


def voxelize(cloud: PointCloud, cfg: VoxelConfig) -> PointVoxelMap:
    xyz = cloud.xyz
    bad = np.flatnonzero(~np.all(np.isfinite(cloud.data), axis=1))
    if len(bad):
        raise InputError(f"point {int(bad[0])} has a non-finite component")
    dims = np.asarray(cfg.grid_dims, dtype=np.int64)
    idx = np.floor((xyz - np.asarray(cfg.range_min)) / np.asarray(cfg.voxel_size)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)

    point_to_voxel = np.full(len(cloud), OUT_OF_RANGE, dtype=np.int64)
    pts = np.flatnonzero(inside)
    keys = coord_keys(idx[pts], cfg.grid_dims)
    uniq, inverse = np.unique(keys, return_inverse=True)
    w, h, _ = cfg.grid_dims
    voxel_coords = np.stack([uniq % w, (uniq // w) % h, uniq // (w * h)], axis=1).reshape(-1, 3)
    point_to_voxel[pts] = inverse.reshape(-1)

    order = np.argsort(inverse.reshape(-1), kind="stable")
    point_order = pts[order]
    counts = np.bincount(inverse.reshape(-1), minlength=len(uniq))
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return PointVoxelMap(point_to_voxel, voxel_coords.astype(np.int64), point_order, offsets, cfg.grid_dims)


def point_features(cloud: PointCloud, vmap: PointVoxelMap, cfg: VoxelConfig) -> np.ndarray:
    """Per-point VFE inputs for in-range points, in ascending point order.

    Columns: ``x, y, z, intensity, dt``, offset from the voxel's point mean,
    offset from the voxel center.
    """
    pts = np.flatnonzero(vmap.in_range)
    vox = vmap.point_to_voxel[pts]
    xyz = cloud.xyz[pts]
    m = vmap.num_voxels
    counts = np.bincount(vox, minlength=m).astype(np.float64)
    sums = np.zeros((m, 3))
    for axis in range(3):
        sums[:, axis] = np.bincount(vox, weights=xyz[:, axis], minlength=m)
    means = sums / np.maximum(counts, 1.0)[:, None]
    centers = cfg.voxel_centers(vmap.voxel_coords)
    return np.column_stack([cloud.data[pts], xyz - means[vox], xyz - centers[vox]])


@dataclass(frozen=True, eq=False)
class VFEConfig:
    """Single linear layer + ReLU per point, max-pooled per voxel.

    ``weight`` is ``(in_features, out_channels)`` with ``in_features >= 11``;
    extra input rows see zero-padded features.
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if weight.ndim != 2 or weight.shape[1] == 0:
            raise ConfigError(f"VFE weight must be (in_features, out_channels), got {weight.shape}")
        if weight.shape[0] < NUM_POINT_FEATURES:
            raise ConfigError(
                f"VFE weight has {weight.shape[0]} input rows, needs at least {NUM_POINT_FEATURES}"
            )
        if bias.shape != (weight.shape[1],):
            raise ConfigError(f"VFE bias shape {bias.shape} != ({weight.shape[1]},)")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]


def vfe_forward(cloud: PointCloud, vmap: PointVoxelMap, voxel_cfg: VoxelConfig, vfe: VFEConfig) -> SparseTensor:
    feats = point_features(cloud, vmap, voxel_cfg)
    pad = vfe.weight.shape[0] - feats.shape[1]
    if pad:
        feats = np.pad(feats, ((0, 0), (0, pad)))
    hidden = np.maximum(feats @ vfe.weight + vfe.bias, 0.0)
    out = np.zeros((vmap.num_voxels, vfe.out_channels))
    # post-ReLU values are >= 0, so a zero start is the identity for max
    np.maximum.at(out, vmap.point_to_voxel[vmap.in_range], hidden)
    return SparseTensor(vmap.voxel_coords, out, voxel_cfg.grid_dims, stride=1)


def devoxelize(voxel_scores: SparseTensor, vmap: PointVoxelMap, fallback_class: int) -> np.ndarray:
    """Copy each voxel's score row to its points; out-of-range points get a one-hot row."""
    if voxel_scores.stride != 1:
        raise InternalError(f"devoxelize needs stride-1 scores, got stride {voxel_scores.stride}")
    if voxel_scores.num_active != vmap.num_voxels or not np.array_equal(voxel_scores.coords, vmap.voxel_coords):
        raise InternalError(
            f"voxel score rows ({voxel_scores.num_active}) not aligned with the voxel map ({vmap.num_voxels})"
        )
    k = voxel_scores.channels
    if not 0 <= fallback_class < k:
        raise ConfigError(f"fallback class {fallback_class} outside [0, {k})")
    n = len(vmap.point_to_voxel)
    out = np.zeros((n, k))
    inside = vmap.in_range
    out[inside] = voxel_scores.features[vmap.point_to_voxel[inside]]
    out[~inside, fallback_class] = 1.0
    return out


def voxel_majority_labels(labels: np.ndarray, vmap: PointVoxelMap, num_classes: int, mask=None) -> np.ndarray:
    """Majority point label per voxel (ties -> lowest class); ``-1`` where no point counts."""
    labels = np.asarray(labels, dtype=np.int64)
    use = vmap.in_range.copy()
    if mask is not None:
        use &= np.asarray(mask, dtype=bool)
    vox = vmap.point_to_voxel[use]
    hist = np.zeros((vmap.num_voxels, num_classes), dtype=np.int64)
    np.add.at(hist, (vox, labels[use]), 1)
    out = np.argmax(hist, axis=1)
    out[hist.sum(axis=1) == 0] = -1
    return out
