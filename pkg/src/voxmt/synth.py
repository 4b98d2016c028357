"""Seeded synthetic LiDAR scenes with known labels and boxes.

Class taxonomy (matches the default config): 0 road, 1 sidewalk,
2 vegetation (stuff); 3 vehicle, 4 pedestrian, 5 cyclist (things).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from voxmt.config import PROFILES, PipelineConfig
from voxmt.heads import Box3D
from voxmt.refine import points_in_box
from voxmt.voxelizer import PointCloud

ROAD, SIDEWALK, VEGETATION = 0, 1, 2
THING_DIMS = ((4.5, 2.0, 1.6), (0.8, 0.8, 1.8), (1.8, 0.7, 1.7))
GROUND_Z = -1.5
GROUND_NOISE = 0.05
BOX_LIFT = 0.1
ROAD_HALF_WIDTH = 6.0
PAST_SWEEP_DT = -0.1


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: PointCloud
    semantic: np.ndarray
    instance: np.ndarray
    boxes: List[Box3D]  # class_id is the thing index


def _place_boxes(rng, n_objects, lo, hi, margin=3.0, tries=1000) -> List[Box3D]:
    boxes: List[Box3D] = []
    for _ in range(tries):
        if len(boxes) == n_objects:
            break
        cls = int(rng.integers(0, len(THING_DIMS)))
        l, w, h = THING_DIMS[cls]
        cx, cy = rng.uniform(lo + margin, hi - margin, size=2)
        yaw = rng.uniform(-math.pi, math.pi)
        radius = math.hypot(l, w) / 2
        if any(math.hypot(cx - b.center[0], cy - b.center[1]) < radius + math.hypot(*b.dims[:2]) / 2 + 0.5 for b in boxes):
            continue
        boxes.append(Box3D((cx, cy, GROUND_Z + BOX_LIFT + h / 2), (l, w, h), yaw, cls, 1.0))
    return boxes


def synth_scene(seed: int, n_objects: int = 6, n_points: int = 20000, config: PipelineConfig = PROFILES["toy"]) -> Scene:
    """Ground plane (road/sidewalk), vegetation blobs and box-shaped objects.

    Object points are drawn uniformly inside 95% of their box; ground and
    vegetation points never fall inside any box. Roughly 10% of the points
    are tagged as a past sweep.
    """
    rng = np.random.default_rng(seed)
    lo, hi = config.range_xy
    boxes = _place_boxes(rng, n_objects, lo, hi)

    n_thing = int(0.3 * n_points) if boxes else 0
    n_veg = int(0.1 * n_points)
    n_ground = n_points - n_thing - n_veg

    xyz_parts, sem_parts, inst_parts = [], [], []
    if boxes:
        per_box = np.full(len(boxes), n_thing // len(boxes))
        per_box[: n_thing % len(boxes)] += 1
        for i, (box, count) in enumerate(zip(boxes, per_box)):
            local = rng.uniform(-0.475, 0.475, size=(count, 3)) * np.asarray(box.dims)
            c, s = math.cos(box.yaw), math.sin(box.yaw)
            world = np.column_stack(
                [c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]]
            ) + np.asarray(box.center)
            xyz_parts.append(world)
            sem_parts.append(np.full(count, config.thing_classes[box.class_id]))
            inst_parts.append(np.full(count, i + 1))

    def outside_boxes(pts):
        keep = np.ones(len(pts), dtype=bool)
        for b in boxes:
            keep &= ~points_in_box(pts, b)
        return keep

    ground = np.empty((0, 3))
    while len(ground) < n_ground:
        cand = np.column_stack(
            [
                rng.uniform(lo, hi, size=n_ground),
                rng.uniform(lo, hi, size=n_ground),
                GROUND_Z + rng.uniform(-GROUND_NOISE, GROUND_NOISE, size=n_ground),
            ]
        )
        ground = np.concatenate([ground, cand[outside_boxes(cand)]])[:n_ground]
    xyz_parts.append(ground)
    sem_parts.append(np.where(np.abs(ground[:, 1]) < ROAD_HALF_WIDTH, ROAD, SIDEWALK))
    inst_parts.append(np.zeros(n_ground, dtype=np.int64))

    if n_veg:
        centers = rng.uniform(lo + 2, hi - 2, size=(4, 2))
        veg = np.empty((0, 3))
        while len(veg) < n_veg:
            which = rng.integers(0, len(centers), size=n_veg)
            cand = np.column_stack(
                [
                    centers[which] + rng.normal(0.0, 1.0, size=(n_veg, 2)),
                    rng.uniform(GROUND_Z + 0.2, GROUND_Z + 3.0, size=n_veg),
                ]
            )
            inside_range = np.all((cand[:, :2] > lo) & (cand[:, :2] < hi), axis=1)
            cand = cand[inside_range & outside_boxes(cand)]
            veg = np.concatenate([veg, cand])[:n_veg]
        xyz_parts.append(veg)
        sem_parts.append(np.full(n_veg, VEGETATION))
        inst_parts.append(np.zeros(n_veg, dtype=np.int64))

    xyz = np.concatenate(xyz_parts)
    semantic = np.concatenate(sem_parts).astype(np.int64)
    instance = np.concatenate(inst_parts).astype(np.int64)
    n = len(xyz)
    perm = rng.permutation(n)
    xyz, semantic, instance = xyz[perm], semantic[perm], instance[perm]
    intensity = rng.uniform(0.0, 1.0, size=n)
    dt = np.where(rng.uniform(size=n) < 0.1, PAST_SWEEP_DT, 0.0)
    return Scene(PointCloud.from_arrays(xyz, intensity, dt), semantic, instance, boxes)
