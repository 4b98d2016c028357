"""Task heads: voxel segmentation, BEV segmentation and center-based detection.

Detection regression channels are ``(dx, dy, z, log l, log w, log h, sin yaw, cos yaw)``
where ``(dx, dy)`` is the sub-cell offset of the box center from the cell's
lower corner.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from voxmt.dense import as_bev, conv1x1
from voxmt.errors import ConfigError, InputError
from voxmt.sparse import SparseTensor
from voxmt.weights import WeightStore

log = logging.getLogger(__name__)

REG_CHANNELS = 8
IOU_ALPHA = 0.5


def wrap_angle(yaw: float) -> float:
    """Map an angle into ``(-pi, pi]``."""
    yaw = math.atan2(math.sin(yaw), math.cos(yaw))
    return math.pi if yaw <= -math.pi else yaw


@dataclass(frozen=True)
class Box3D:
    center: Tuple[float, float, float]
    dims: Tuple[float, float, float]
    yaw: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        dims = tuple(float(v) for v in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise InputError("box center and dims need three components each")
        if not all(d > 0 for d in dims):
            raise InputError(f"box dims must be positive, got {dims}")
        if not math.isfinite(self.score):
            raise InputError(f"box score must be finite, got {self.score}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    def footprint(self) -> np.ndarray:
        """Corner ``(x, y)`` coordinates of the BEV rectangle, counter-clockwise."""
        l, w, _ = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated footprint IoU of two boxes in the x-y plane."""
    pa, pb = Polygon(a.footprint()), Polygon(b.footprint())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass(frozen=True)
class BevGeometry:
    """Placement of a dense BEV plane: cell ``(row, col)`` covers
    ``x in [x_min + col*cell_x, ...)`` and ``y in [y_min + row*cell_y, ...)``."""

    x_min: float
    y_min: float
    cell_x: float
    cell_y: float
    height: int
    width: int

    def cell_coords(self, x: float, y: float) -> Tuple[float, float]:
        """Continuous ``(u, v)`` = (column, row) position of a metric point."""
        return (x - self.x_min) / self.cell_x, (y - self.y_min) / self.cell_y


# ---------------------------------------------------------------- heads


def seg_head(decoder_out: SparseTensor, weights: WeightStore, prefix: str = "head.seg") -> SparseTensor:
    """Per-voxel linear classifier; ``{prefix}.weight`` is ``(C, K)``."""
    w = weights.get64(f"{prefix}.weight")
    b = weights.get64(f"{prefix}.bias")
    if w.ndim != 2 or w.shape[0] != decoder_out.channels:
        raise ConfigError(f"{prefix}.weight shape {w.shape} incompatible with {decoder_out.channels} channels")
    if b.shape != (w.shape[1],):
        raise ConfigError(f"{prefix}.bias shape {b.shape} != ({w.shape[1]},)")
    return decoder_out.with_features(decoder_out.features @ w + b)


def bev_seg_head(bev: np.ndarray, weights: WeightStore, prefix: str = "head.bev_seg") -> np.ndarray:
    return conv1x1(bev, weights.get64(f"{prefix}.weight"), weights.get64(f"{prefix}.bias"))


class DetOutputs(NamedTuple):
    heatmap: np.ndarray  # (K_thing, H, W), after the logistic function
    reg: np.ndarray  # (8, H, W)
    iou: np.ndarray  # (1, H, W)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def det_head(bev: np.ndarray, weights: WeightStore, prefix: str = "head.det") -> DetOutputs:
    bev = as_bev(bev)
    hm = conv1x1(bev, weights.get64(f"{prefix}.hm.weight"), weights.get64(f"{prefix}.hm.bias"))
    reg = conv1x1(bev, weights.get64(f"{prefix}.reg.weight"), weights.get64(f"{prefix}.reg.bias"))
    iou = conv1x1(bev, weights.get64(f"{prefix}.iou.weight"), weights.get64(f"{prefix}.iou.bias"))
    if reg.shape[0] != REG_CHANNELS or iou.shape[0] != 1:
        raise ConfigError(f"detection head needs 8 reg and 1 iou channels, got {reg.shape[0]} and {iou.shape[0]}")
    return DetOutputs(sigmoid(hm), reg, iou)


# ---------------------------------------------------------------- targets


def gaussian_radius(height: float, width: float, min_overlap: float = 0.1) -> float:
    """Largest corner displacement keeping IoU >= ``min_overlap`` (CornerNet heuristic)."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 * b1 - 4 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 * b2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_window(radius: int) -> np.ndarray:
    """``(2r+1, 2r+1)`` Gaussian with sigma ``(2r+1)/6`` and a peak of exactly 1."""
    sigma = (2 * radius + 1) / 6.0
    off = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2 * sigma * sigma))


def draw_gaussian(plane: np.ndarray, row: int, col: int, radius: int) -> None:
    """Cellwise-max a Gaussian centered at ``(row, col)`` into ``plane`` (in place)."""
    h, w = plane.shape
    g = gaussian_window(radius)
    top, bottom = min(row, radius), min(h - row, radius + 1)
    left, right = min(col, radius), min(w - col, radius + 1)
    region = plane[row - top : row + bottom, col - left : col + right]
    patch = g[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(region, patch, out=region)


@dataclass(frozen=True, eq=False)
class DetTargets:
    heatmap: np.ndarray  # (K_thing, H, W)
    cells: np.ndarray  # (B, 2) row, col of each rendered box
    classes: np.ndarray  # (B,)
    reg: np.ndarray  # (B, 8)
    iou: np.ndarray  # (B,)
    box_index: np.ndarray  # (B,) position of each rendered box in the input list
    skipped: int = 0


def encode_box(box: Box3D, geom: BevGeometry) -> Tuple[int, int, np.ndarray]:
    u, v = geom.cell_coords(box.center[0], box.center[1])
    col, row = int(math.floor(u)), int(math.floor(v))
    l, w, h = box.dims
    reg = np.array(
        [u - col, v - row, box.center[2], math.log(l), math.log(w), math.log(h), math.sin(box.yaw), math.cos(box.yaw)]
    )
    return row, col, reg


def render_targets(
    gt_boxes: Sequence[Box3D], geom: BevGeometry, num_thing: int, min_overlap: float = 0.1, min_radius: int = 2
) -> DetTargets:
    heatmap = np.zeros((num_thing, geom.height, geom.width))
    cells, classes, regs, kept = [], [], [], []
    skipped = 0
    for i, box in enumerate(gt_boxes):
        if not 0 <= box.class_id < num_thing:
            raise InputError(f"box {i} class {box.class_id} outside [0, {num_thing})")
        row, col, reg = encode_box(box, geom)
        if not (0 <= row < geom.height and 0 <= col < geom.width):
            skipped += 1
            continue
        size_l = box.dims[0] / geom.cell_x
        size_w = box.dims[1] / geom.cell_y
        radius = max(min_radius, int(gaussian_radius(size_w, size_l, min_overlap)))
        draw_gaussian(heatmap[box.class_id], row, col, radius)
        cells.append((row, col))
        classes.append(box.class_id)
        regs.append(reg)
        kept.append(i)
    if skipped:
        log.warning("skipped %d ground-truth boxes centered outside the BEV plane", skipped)
    return DetTargets(
        heatmap=heatmap,
        cells=np.asarray(cells, dtype=np.int64).reshape(-1, 2),
        classes=np.asarray(classes, dtype=np.int64),
        reg=np.asarray(regs, dtype=np.float64).reshape(-1, REG_CHANNELS),
        iou=np.ones(len(kept)),
        box_index=np.asarray(kept, dtype=np.int64),
        skipped=skipped,
    )


# ---------------------------------------------------------------- decoding


def local_peaks(plane: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3 local maxima with plateaus broken in raster order.

    A cell must be strictly greater than neighbours that precede it in
    ``(row, col)`` order and not smaller than the ones that follow it.
    """
    h, w = plane.shape
    padded = np.pad(plane, 1, constant_values=-np.inf)
    peak = np.ones_like(plane, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            if dr < 0 or (dr == 0 and dc < 0):
                peak &= plane > nb
            else:
                peak &= plane >= nb
    return peak


def decode_box_at(reg: np.ndarray, row: int, col: int, geom: BevGeometry, class_id: int, score: float) -> Box3D:
    dx, dy, z, log_l, log_w, log_h, s, c = (float(v) for v in reg[:, row, col])
    cx = geom.x_min + (col + dx) * geom.cell_x
    cy = geom.y_min + (row + dy) * geom.cell_y
    dims = (math.exp(log_l), math.exp(log_w), math.exp(log_h))
    return Box3D((cx, cy, z), dims, math.atan2(s, c), class_id, score)


def decode_boxes(
    outputs: DetOutputs, geom: BevGeometry, max_boxes: int = 50, score_thresh: float = 0.1, alpha: float = IOU_ALPHA
) -> List[Box3D]:
    """Peak-pick every class heatmap and rebuild boxes from the regression map.

    The returned score is ``heatmap^(1-alpha) * iou^alpha`` with the IoU
    channel clipped to ``[0, 1]``. Boxes come back sorted by score
    (descending), ties broken by ``(row, col, class)``.
    """
    hm = np.asarray(outputs.heatmap, dtype=np.float64)
    iou = np.clip(np.asarray(outputs.iou, dtype=np.float64)[0], 0.0, 1.0)
    cands = []
    for cls in range(hm.shape[0]):
        rows, cols = np.nonzero(local_peaks(hm[cls]))
        for r, c in zip(rows.tolist(), cols.tolist()):
            score = hm[cls, r, c] ** (1 - alpha) * iou[r, c] ** alpha
            if score > score_thresh:
                cands.append((-score, r, c, cls))
    cands.sort()
    return [
        decode_box_at(outputs.reg, r, c, geom, cls, -neg) for neg, r, c, cls in cands[: max(0, max_boxes)]
    ]


def sample_bev(bev: np.ndarray, geom: BevGeometry, xy: np.ndarray) -> np.ndarray:
    """Bilinear BEV features at metric ``(x, y)`` locations; cell centers sit at integer+0.5.

    Samples outside the plane are clamped to the border cells.
    """
    bev = as_bev(bev)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    c, h, w = bev.shape
    u = np.clip((xy[:, 0] - geom.x_min) / geom.cell_x - 0.5, 0.0, w - 1)
    v = np.clip((xy[:, 1] - geom.y_min) / geom.cell_y - 0.5, 0.0, h - 1)
    c0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    r0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fu = (u - c0)[:, None]
    fv = (v - r0)[:, None]
    f00 = bev[:, r0, c0].T
    f01 = bev[:, r0, c1].T
    f10 = bev[:, r1, c0].T
    f11 = bev[:, r1, c1].T
    return (1 - fv) * ((1 - fu) * f00 + fu * f01) + fv * ((1 - fu) * f10 + fu * f11)
