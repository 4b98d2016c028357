"""Loss components with analytic gradients and uncertainty-based task weighting.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
prediction argument. Uncertainty parameters are stored as ``s = log sigma^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from voxmt.errors import InputError

TASKS = ("SEG", "DET", "BEV")
COMPONENTS = ("ce_v", "lovasz_v", "hm", "reg", "iou", "ce_bev", "lovasz_bev")
DET_WEIGHTS = {"hm": 1.0, "reg": 2.0, "iou": 1.0}
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
PROB_EPS = 1e-6


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels, ignore_mask=None) -> Tuple[float, np.ndarray]:
    """Mean negative log-softmax at the true class over non-ignored rows."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m, k = logits.shape
    if len(labels) != m:
        raise InputError(f"{len(labels)} labels for {m} logit rows")
    keep = np.ones(m, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    keep &= labels >= 0
    if np.any(labels[keep] >= k):
        raise InputError(f"label outside [0, {k})")
    grad = np.zeros_like(logits)
    count = int(keep.sum())
    if count == 0:
        return 0.0, grad
    z = logits[keep]
    y = labels[keep]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(count), y] - log_norm
    p = np.exp(shifted - log_norm[:, None])
    p[np.arange(count), y] -= 1.0
    grad[keep] = p / count
    return float(-log_p.mean()), grad


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a sorted ground-truth indicator."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, ignore_mask=None) -> Tuple[float, np.ndarray]:
    """Lovasz-Softmax averaged over the classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    grad = np.zeros_like(probs)
    if probs.size == 0:
        return 0.0, grad
    m, k = probs.shape
    keep = np.ones(m, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    keep &= labels >= 0
    rows = np.flatnonzero(keep)
    if len(rows) == 0:
        return 0.0, grad
    y = labels[rows]
    present = np.unique(y)
    total = 0.0
    for c in present:
        fg = (y == c).astype(np.float64)
        pc = probs[rows, c]
        errors = np.abs(fg - pc)
        order = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[order])
        total += float(errors[order] @ g)
        # d|fg - p|/dp = -1 on foreground, +1 elsewhere (fg - p >= 0 iff fg = 1 for p in [0, 1])
        sign = np.where(fg[order] == 1.0, -1.0, 1.0)
        grad[rows[order], c] += sign * g
    n = len(present)
    grad /= n
    return total / n, grad


def gaussian_focal(pred_hm, target_hm) -> Tuple[float, np.ndarray]:
    """Penalty-reduced focal loss on probability heatmaps, normalized by the peak count."""
    pred = np.asarray(pred_hm, dtype=np.float64)
    target = np.asarray(target_hm, dtype=np.float64)
    if pred.shape != target.shape:
        raise InputError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    clamped = (pred < PROB_EPS) | (pred > 1 - PROB_EPS)
    p = np.clip(pred, PROB_EPS, 1 - PROB_EPS)
    pos = target == 1.0
    neg_w = (1.0 - target) ** FOCAL_BETA
    a = FOCAL_ALPHA
    pos_loss = np.where(pos, -((1 - p) ** a) * np.log(p), 0.0)
    neg_loss = np.where(pos, 0.0, -neg_w * p**a * np.log(1 - p))
    norm = max(int(pos.sum()), 1)
    value = float((pos_loss.sum() + neg_loss.sum()) / norm)
    d_pos = a * (1 - p) ** (a - 1) * np.log(p) - (1 - p) ** a / p
    d_neg = -neg_w * (a * p ** (a - 1) * np.log(1 - p) - p**a / (1 - p))
    grad = np.where(pos, d_pos, d_neg) / norm
    grad[clamped] = 0.0
    return value, grad


def l1_loss(pred, target, mask=None) -> Tuple[float, np.ndarray]:
    """Mean absolute error over masked entries; subgradient 0 at exact ties."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InputError(f"shapes differ: {pred.shape} vs {target.shape}")
    m = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    count = int(m.sum())
    grad = np.zeros_like(pred)
    if count == 0:
        return 0.0, grad
    diff = pred - target
    grad[m] = np.sign(diff[m]) / count
    return float(np.abs(diff[m]).sum() / count), grad


def binary_cross_entropy(probs, targets) -> Tuple[float, np.ndarray]:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0:
        return 0.0, np.zeros_like(p)
    value = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    grad = (p - t) / (p * (1 - p)) / p.size
    return float(value), grad


def group_det(hm: float, reg: float, iou: float) -> float:
    return DET_WEIGHTS["hm"] * hm + DET_WEIGHTS["reg"] * reg + DET_WEIGHTS["iou"] * iou


def uncertainty_weighted(losses: Mapping[str, float], log_vars: Mapping[str, float]) -> Tuple[float, Dict[str, float]]:
    """``sum_i L_i * exp(-s_i) / 2 + s_i / 2`` and its derivative in every ``s_i``."""
    total = 0.0
    grads = {}
    for name, value in losses.items():
        s = float(log_vars[name])
        w = 0.5 * np.exp(-s)
        total += w * float(value) + 0.5 * s
        grads[name] = float(-w * float(value) + 0.5)
    return float(total), grads


def total_uncertainty_loss(l_seg: float, l_det: float, l_bev: float, params: "UncertaintyParams") -> Tuple[float, Dict[str, float]]:
    return uncertainty_weighted({"SEG": l_seg, "DET": l_det, "BEV": l_bev}, params.log_vars)


@dataclass
class UncertaintyParams:
    """``log sigma^2`` per task (grouped mode) or per loss component (per-loss mode)."""

    log_vars: Dict[str, float] = field(default_factory=lambda: {t: 0.0 for t in TASKS})

    def __post_init__(self):
        for k, v in self.log_vars.items():
            if not np.isfinite(v):
                raise InputError(f"log variance for {k} is not finite")

    @property
    def sigma2(self) -> Dict[str, float]:
        return {k: float(np.exp(v)) for k, v in self.log_vars.items()}


@dataclass
class TaskLossReport:
    components: Dict[str, float]
    seg: float
    det: float
    bev: float
    total: float
    grad_log_vars: Dict[str, float]
    extras: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        out = dict(self.components)
        out.update({"L_SEG": self.seg, "L_DET": self.det, "L_BEV": self.bev, "total": self.total})
        out.update({f"dtotal/ds_{k}": v for k, v in self.grad_log_vars.items()})
        out.update(self.extras)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v:.9g}\n" for k, v in self.as_dict().items())


def combine_losses(components: Mapping[str, float], params: Optional[UncertaintyParams] = None, per_loss: bool = False) -> TaskLossReport:
    """Group the seven components into task losses and apply uncertainty weighting.

    ``per_loss=True`` weights each component separately instead; ``params``
    must then carry one entry per component name.
    """
    missing = [c for c in COMPONENTS if c not in components]
    if missing:
        raise InputError(f"missing loss components: {missing}")
    comp = {c: float(components[c]) for c in COMPONENTS}
    seg = comp["ce_v"] + comp["lovasz_v"]
    det = group_det(comp["hm"], comp["reg"], comp["iou"])
    bev = comp["ce_bev"] + comp["lovasz_bev"]
    if per_loss:
        params = params or UncertaintyParams({c: 0.0 for c in COMPONENTS})
        total, grads = uncertainty_weighted(comp, params.log_vars)
    else:
        params = params or UncertaintyParams()
        total, grads = total_uncertainty_loss(seg, det, bev, params)
    return TaskLossReport(comp, seg, det, bev, total, grads)
