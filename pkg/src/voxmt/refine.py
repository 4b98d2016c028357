"""Second-stage refinement: point-box assignment, the point scorer and score fusion.

Refined score vectors have ``K_thing + 1`` entries; the last one is the
catch-all stuff entry. A :class:`ClassMap` ties refined entry ``j`` to the
global class ``thing_classes[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np

from voxmt.errors import ConfigError, InputError
from voxmt.heads import Box3D, sigmoid
from voxmt.losses import softmax
from voxmt.weights import WeightStore

NOT_IN_BOX = -1


@dataclass(frozen=True)
class ClassMap:
    num_classes: int
    thing_classes: Tuple[int, ...]

    def __post_init__(self):
        things = tuple(int(c) for c in self.thing_classes)
        if len(set(things)) != len(things) or any(not 0 <= c < self.num_classes for c in things):
            raise ConfigError(f"thing classes {things} must be distinct ids in [0, {self.num_classes})")
        object.__setattr__(self, "thing_classes", things)

    @property
    def num_thing(self) -> int:
        return len(self.thing_classes)

    @property
    def stuff_classes(self) -> Tuple[int, ...]:
        return tuple(c for c in range(self.num_classes) if c not in self.thing_classes)

    def to_global(self, thing_index: int) -> int:
        return self.thing_classes[thing_index]


def box_local_coords(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Translate by ``-center`` then rotate by ``-yaw`` about z."""
    rel = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(box.center)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    x = c * rel[:, 0] + s * rel[:, 1]
    y = -s * rel[:, 0] + c * rel[:, 1]
    return np.column_stack([x, y, rel[:, 2]])


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    local = box_local_coords(points, box)
    half = np.asarray(box.dims) / 2
    return np.all(np.abs(local) <= half, axis=1)


def assign_points(xyz: np.ndarray, boxes: Sequence[Box3D]) -> np.ndarray:
    """Box index per point, ``NOT_IN_BOX`` when outside all boxes.

    Points inside several boxes take the highest-scoring one (ties -> lowest
    box index).
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    index = np.full(len(xyz), NOT_IN_BOX, dtype=np.int64)
    order = sorted(range(len(boxes)), key=lambda b: (-boxes[b].score, b))
    for b in order:
        inside = points_in_box(xyz, boxes[b]) & (index == NOT_IN_BOX)
        index[inside] = b
    return index


def local_transform(xyz: np.ndarray, boxes: Sequence[Box3D], index: np.ndarray) -> np.ndarray:
    """Box-frame coordinates of assigned points; rows of unassigned points are NaN."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    out = np.full_like(xyz, np.nan)
    for b, box in enumerate(boxes):
        sel = index == b
        if sel.any():
            out[sel] = box_local_coords(xyz[sel], box)
    return out


class StageTwoScores(NamedTuple):
    s_point: np.ndarray  # (N,), NaN for unassigned points
    s_box: np.ndarray  # (B, K_thing + 1)


def second_stage_forward(
    local: np.ndarray,
    voxel_feats: np.ndarray,
    box_feats: np.ndarray,
    index: np.ndarray,
    weights: WeightStore,
    prefix: str = "stage2",
) -> StageTwoScores:
    """Shared point MLP -> mask logit; max-pooled point features + box features -> class softmax.

    Weights: ``{prefix}.point`` ``(3 + C_vox, H)``, ``{prefix}.mask`` ``(H, 1)``,
    ``{prefix}.box`` ``(H + C_bev, K_thing + 1)``, each with a bias.
    """
    index = np.asarray(index, dtype=np.int64)
    n = len(index)
    box_feats = np.asarray(box_feats, dtype=np.float64)
    nb = box_feats.shape[0]
    w_pt = weights.get64(f"{prefix}.point.weight")
    b_pt = weights.get64(f"{prefix}.point.bias")
    w_mask = weights.get64(f"{prefix}.mask.weight")
    b_mask = weights.get64(f"{prefix}.mask.bias")
    w_box = weights.get64(f"{prefix}.box.weight")
    b_box = weights.get64(f"{prefix}.box.bias")
    hidden_dim = w_pt.shape[1]
    c_vox = np.asarray(voxel_feats).shape[1]
    if w_pt.shape[0] != 3 + c_vox:
        raise ConfigError(f"{prefix}.point.weight rows {w_pt.shape[0]} != 3 + {c_vox} voxel channels")
    if w_mask.shape != (hidden_dim, 1):
        raise ConfigError(f"{prefix}.mask.weight shape {w_mask.shape} != ({hidden_dim}, 1)")
    if w_box.shape[0] != hidden_dim + box_feats.shape[1]:
        raise ConfigError(f"{prefix}.box.weight rows {w_box.shape[0]} != {hidden_dim} + {box_feats.shape[1]}")

    assigned = np.flatnonzero(index != NOT_IN_BOX)
    s_point = np.full(n, np.nan)
    pooled = np.zeros((nb, hidden_dim))
    if len(assigned):
        x = np.column_stack([np.asarray(local)[assigned], np.asarray(voxel_feats)[assigned]])
        hidden = np.maximum(x @ w_pt + b_pt, 0.0)
        s_point[assigned] = sigmoid(hidden @ w_mask[:, 0] + b_mask[0])
        # post-ReLU features are >= 0, so zeros are the max-pool identity and the empty-box value
        np.maximum.at(pooled, index[assigned], hidden)
    logits = np.column_stack([pooled, box_feats]) @ w_box + b_box if nb else np.zeros((0, w_box.shape[1]))
    return StageTwoScores(s_point, softmax(logits, axis=1) if nb else logits)


def fuse_s2nd(s_point: np.ndarray, s_box: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Combine mask and box class scores; rows of unassigned points are NaN."""
    index = np.asarray(index, dtype=np.int64)
    s_box = np.asarray(s_box, dtype=np.float64)
    out = np.full((len(index), s_box.shape[1]), np.nan)
    sel = np.flatnonzero(index != NOT_IN_BOX)
    if len(sel):
        sp = np.asarray(s_point, dtype=np.float64)[sel][:, None]
        rows = sp * s_box[index[sel]]
        rows[:, -1] += 1.0 - sp[:, 0]
        out[sel] = rows
    return out


def fuse_final(s_1st: np.ndarray, s_2nd: np.ndarray, index: np.ndarray, class_map: ClassMap) -> np.ndarray:
    """Unassigned points keep their first-stage row; assigned points get
    ``S_1st * S_2nd(stuff)`` plus the refined thing score on thing classes."""
    s_1st = np.asarray(s_1st, dtype=np.float64)
    s_2nd = np.asarray(s_2nd, dtype=np.float64)
    index = np.asarray(index, dtype=np.int64)
    if s_1st.shape[1] != class_map.num_classes:
        raise ConfigError(f"first-stage scores have {s_1st.shape[1]} classes, class map has {class_map.num_classes}")
    if s_2nd.shape[1] != class_map.num_thing + 1:
        raise ConfigError(f"refined scores have {s_2nd.shape[1]} entries, expected {class_map.num_thing + 1}")
    out = s_1st.copy()
    sel = np.flatnonzero(index != NOT_IN_BOX)
    if len(sel):
        rows = s_1st[sel] * s_2nd[sel, -1:]
        rows[:, list(class_map.thing_classes)] += s_2nd[sel, :-1]
        out[sel] = rows
    return out


class PanopticLabel(NamedTuple):
    semantic: np.ndarray
    instance: np.ndarray


def panoptic_assign(s_final: np.ndarray, boxes: Sequence[Box3D], index: np.ndarray, class_map: ClassMap) -> PanopticLabel:
    """Argmax semantics; box ``b`` gives id ``b + 1`` to its points that share its class.

    A box that claims no points leaves its id unused.
    """
    semantic = np.argmax(np.asarray(s_final), axis=1).astype(np.int64)
    index = np.asarray(index, dtype=np.int64)
    instance = np.zeros(len(semantic), dtype=np.int64)
    for b, box in enumerate(boxes):
        if not 0 <= box.class_id < class_map.num_thing:
            raise InputError(f"box {b} has thing index {box.class_id} outside [0, {class_map.num_thing})")
        instance[(index == b) & (semantic == class_map.to_global(box.class_id))] = b + 1
    return PanopticLabel(semantic, instance)
