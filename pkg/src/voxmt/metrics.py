"""Semantic mIoU and panoptic quality (PQ / SQ / RQ) over point labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from voxmt.errors import InputError


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise InputError(f"prediction has {len(pred)} labels, ground truth {len(gt)}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if len(arr) and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} label outside [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(pred, gt, num_classes: int, ignore_ids: Iterable[int] = (), mask=None) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both) and their mean.

    Points whose ground-truth label is in ``ignore_ids`` or excluded by
    ``mask`` do not count. Ignored classes are also left out of the mean.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise InputError(f"prediction has {len(pred)} labels, ground truth {len(gt)}")
    ignore = set(int(i) for i in ignore_ids)
    keep = ~np.isin(gt, list(ignore)) if ignore else np.ones(len(gt), dtype=bool)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    cm = confusion_matrix(pred[keep], gt[keep], num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    for c in ignore:
        if 0 <= c < num_classes:
            iou[c] = np.nan
    valid = ~np.isnan(iou)
    return iou, float(iou[valid].mean()) if valid.any() else float("nan")


@dataclass
class ClassPQ:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def pq(self) -> float:
        d = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / d if d else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        d = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / d if d else 0.0


@dataclass
class PQResult:
    """Pooled PQ/SQ/RQ over every segment of every class, plus per-class values.

    ``pq_class_mean`` is the mean of per-class PQ over classes with at least
    one segment.
    """

    pq: float
    sq: float
    rq: float
    per_class: Dict[int, ClassPQ] = field(default_factory=dict)

    @property
    def pq_class_mean(self) -> float:
        vals = [c.pq for c in self.per_class.values() if c.tp + c.fp + c.fn]
        return float(np.mean(vals)) if vals else 0.0


def pq(pred, gt, thing_classes: Sequence[int], stuff_classes: Sequence[int]) -> PQResult:
    """Panoptic quality with unique matching at IoU > 0.5.

    ``pred`` and ``gt`` are ``(semantic, instance)`` pairs. Thing segments are
    ``(class, instance > 0)``; each stuff class forms one segment. Thing
    points with instance 0 and classes outside both lists are void.
    """
    p_sem, p_inst = (np.asarray(a, dtype=np.int64).reshape(-1) for a in pred)
    g_sem, g_inst = (np.asarray(a, dtype=np.int64).reshape(-1) for a in gt)
    n = len(g_sem)
    if not (len(p_sem) == len(p_inst) == len(g_inst) == n):
        raise InputError("prediction and ground truth must label the same number of points")
    things = set(int(c) for c in thing_classes)
    classes = things | set(int(c) for c in stuff_classes)
    scale = int(max(p_inst.max(initial=0), g_inst.max(initial=0))) + 1

    def keys(sem, inst):
        is_thing = np.isin(sem, list(things))
        key = sem * scale + np.where(is_thing, inst, 0)
        key[~np.isin(sem, list(classes))] = -1
        key[is_thing & (inst == 0)] = -1
        return key

    pk, gk = keys(p_sem, p_inst), keys(g_sem, g_inst)
    p_ids, p_area = np.unique(pk[pk >= 0], return_counts=True)
    g_ids, g_area = np.unique(gk[gk >= 0], return_counts=True)
    p_size = dict(zip(p_ids.tolist(), p_area.tolist()))
    g_size = dict(zip(g_ids.tolist(), g_area.tolist()))

    both = (pk >= 0) & (gk >= 0) & (p_sem == g_sem)
    pairs, inter = np.unique(np.stack([pk[both], gk[both]], axis=1), axis=0, return_counts=True)

    per_class = {c: ClassPQ() for c in sorted(classes)}
    matched_p, matched_g = set(), set()
    for (pid, gid), i in zip(pairs.tolist(), inter.tolist()):
        union = p_size[pid] + g_size[gid] - i
        iou = i / union
        if iou > 0.5:
            cls = gid // scale
            per_class[cls].tp += 1
            per_class[cls].iou_sum += iou
            matched_p.add(pid)
            matched_g.add(gid)
    for pid in p_size:
        if pid not in matched_p:
            per_class[pid // scale].fp += 1
    for gid in g_size:
        if gid not in matched_g:
            per_class[gid // scale].fn += 1

    pooled = ClassPQ(
        tp=sum(c.tp for c in per_class.values()),
        fp=sum(c.fp for c in per_class.values()),
        fn=sum(c.fn for c in per_class.values()),
        iou_sum=sum(c.iou_sum for c in per_class.values()),
    )
    return PQResult(pooled.pq, pooled.sq, pooled.rq, per_class)
