"""Test-time augmentation transforms and score averaging.

A transform maps ``p -> scale * R p + t`` with ``R = yaw @ pitch @ roll``
(flips are folded into ``R`` as reflections). Scaling is about the origin
and translation comes last.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from voxmt.errors import InputError
from voxmt.voxelizer import PointCloud

DEFAULT_SCALES = (0.95, 1.05)
DEFAULT_YAWS_DEG = (22.5, -22.5, 45.0, -45.0, 135.0, -135.0, 157.5, -157.5, 180.0)
DEFAULT_PITCHES_DEG = (8.0, -8.0)
DEFAULT_ROLLS_DEG = (5.0, -5.0)
DEFAULT_Z_SHIFTS = (0.2, -0.2)


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p -> scale * linear @ p + translation`` where ``linear`` is orthogonal."""

    name: str
    linear: np.ndarray
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def build(cls, name, scale=1.0, yaw=0.0, pitch=0.0, roll=0.0, flip_x=False, flip_y=False, dz=0.0):
        """Angles in radians. ``flip_y`` mirrors across the xz-plane, ``flip_x`` across the yz-plane."""
        reflect = np.diag([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0])
        linear = _rot_z(yaw) @ _rot_y(pitch) @ _rot_x(roll) @ reflect
        return cls(name, linear, float(scale), np.array([0.0, 0.0, float(dz)]))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return self.scale * xyz @ self.linear.T + self.translation

    def inverse(self) -> "RigidTransform":
        inv_lin = self.linear.T
        inv_scale = 1.0 / self.scale
        return RigidTransform(f"inv({self.name})", inv_lin, inv_scale, -inv_scale * inv_lin @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(
            f"{self.name}*{other.name}",
            self.linear @ other.linear,
            self.scale * other.scale,
            self.scale * self.linear @ other.translation + self.translation,
        )

    def __call__(self, cloud: PointCloud) -> PointCloud:
        return cloud.with_xyz(self.apply(cloud.xyz))


def make_tta_set(
    scales: Sequence[float] = DEFAULT_SCALES,
    yaws_deg: Sequence[float] = DEFAULT_YAWS_DEG,
    pitches_deg: Sequence[float] = DEFAULT_PITCHES_DEG,
    rolls_deg: Sequence[float] = DEFAULT_ROLLS_DEG,
    z_shifts: Sequence[float] = DEFAULT_Z_SHIFTS,
    flips: bool = True,
) -> List[RigidTransform]:
    """Identity plus one transform per listed augmentation (20 with the defaults)."""
    out = [RigidTransform.build("identity")]
    if flips:
        out.append(RigidTransform.build("flip_xz", flip_y=True))
        out.append(RigidTransform.build("flip_yz", flip_x=True))
    out += [RigidTransform.build(f"scale_{s:g}", scale=s) for s in scales]
    out += [RigidTransform.build(f"yaw_{a:g}", yaw=math.radians(a)) for a in yaws_deg]
    out += [RigidTransform.build(f"pitch_{a:g}", pitch=math.radians(a)) for a in pitches_deg]
    out += [RigidTransform.build(f"roll_{a:g}", roll=math.radians(a)) for a in rolls_deg]
    out += [RigidTransform.build(f"z_{d:+g}", dz=d) for d in z_shifts]
    return out


def ensemble_scores(score_list: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean, summed in list order."""
    if not score_list:
        raise InputError("nothing to ensemble")
    first = np.asarray(score_list[0], dtype=np.float64)
    acc = first.copy()
    for i, s in enumerate(score_list[1:], 1):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != first.shape:
            raise InputError(f"score matrix {i} has shape {s.shape}, expected {first.shape}")
        acc += s
    if len(score_list) == 1:
        return acc
    return acc / len(score_list)


class TTAVariantError(RuntimeError):
    pass


def tta_infer(
    cloud: PointCloud,
    infer: Callable[[PointCloud], np.ndarray],
    transforms: Sequence[RigidTransform],
    workers: int = 1,
) -> np.ndarray:
    """Mean per-point scores over transformed copies of ``cloud``.

    Transforms keep point order, so rows line up without any remapping.
    Variants may run on worker threads; aggregation is always in list order.
    """

    def run(t: RigidTransform) -> np.ndarray:
        try:
            return np.asarray(infer(t(cloud)), dtype=np.float64)
        except Exception as exc:
            raise TTAVariantError(f"TTA variant {t.name!r} failed: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, transforms))
    else:
        results = [run(t) for t in transforms]
    return ensemble_scores(results)
