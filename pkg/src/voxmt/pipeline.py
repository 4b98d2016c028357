"""End-to-end inference: voxelize -> VFE -> U-Net with GCP -> heads -> stage 2 -> panoptic."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from voxmt.config import PipelineConfig
from voxmt.errors import VoxmtError
from voxmt.gcp import global_context_pooling
from voxmt.heads import (
    BevGeometry,
    Box3D,
    DetOutputs,
    bev_iou,
    bev_seg_head,
    decode_box_at,
    decode_boxes,
    det_head,
    render_targets,
    sample_bev,
    seg_head,
)
from voxmt.losses import (
    TaskLossReport,
    UncertaintyParams,
    binary_cross_entropy,
    combine_losses,
    cross_entropy,
    gaussian_focal,
    l1_loss,
    lovasz_softmax,
    softmax,
)
from voxmt.model import check_weights, extractor_config, unet_arch
from voxmt.refine import (
    NOT_IN_BOX,
    ClassMap,
    PanopticLabel,
    assign_points,
    fuse_final,
    fuse_s2nd,
    local_transform,
    panoptic_assign,
    second_stage_forward,
)
from voxmt.sparse import SparseTensor
from voxmt.tta import RigidTransform, tta_infer
from voxmt.unet import UNetOutput, run_unet
from voxmt.voxelizer import (
    PointCloud,
    PointVoxelMap,
    VFEConfig,
    devoxelize,
    vfe_forward,
    voxel_majority_labels,
    voxelize,
)
from voxmt.weights import WeightStore


@contextlib.contextmanager
def _stage(name: str):
    """Prefix errors raised inside a stage with its name, keeping the error type."""
    try:
        yield
    except VoxmtError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


@dataclass
class GroundTruth:
    semantic: np.ndarray
    instance: np.ndarray
    boxes: List[Box3D]  # class_id is the thing index


@dataclass
class FirstStage:
    vmap: PointVoxelMap
    unet: UNetOutput
    bev: np.ndarray
    voxel_logits: SparseTensor
    s_1st: np.ndarray
    bev_logits: np.ndarray
    det: DetOutputs


@dataclass
class PipelineResult:
    s_1st: np.ndarray
    boxes: List[Box3D]
    s_final: np.ndarray
    panoptic: PanopticLabel
    index: np.ndarray
    s_point: np.ndarray
    s_box: np.ndarray
    s_2nd: np.ndarray
    loss: Optional[TaskLossReport] = None
    first: Optional[FirstStage] = field(default=None, repr=False)


class Pipeline:
    def __init__(self, config: PipelineConfig, weights: WeightStore):
        check_weights(weights, config)
        self.config = config
        self.weights = weights
        self.class_map = ClassMap(config.num_classes, tuple(config.thing_classes))
        vox = config.voxel
        bw, bh, _ = config.bottom_dims
        self.geometry = BevGeometry(
            vox.range_min[0],
            vox.range_min[1],
            vox.voxel_size[0] * config.downsampling,
            vox.voxel_size[1] * config.downsampling,
            bh,
            bw,
        )

    def first_stage(self, cloud: PointCloud) -> FirstStage:
        cfg, w = self.config, self.weights
        with _stage("voxelize"):
            vmap = voxelize(cloud, cfg.voxel)
        with _stage("vfe"):
            x = vfe_forward(cloud, vmap, cfg.voxel, VFEConfig(w.get64("vfe.weight"), w.get64("vfe.bias")))
        bev_holder = {}

        def bridge(bottom: SparseTensor) -> SparseTensor:
            with _stage("gcp"):
                sparse, bev = global_context_pooling(
                    bottom,
                    w,
                    extractor_config(cfg),
                    cfg.gcp_out_width,
                    identity=cfg.gcp_mode == "identity",
                )
            bev_holder["bev"] = bev
            return sparse

        with _stage("unet"):
            unet = run_unet(x, unet_arch(cfg), w, bridge)
        bev = bev_holder["bev"]
        with _stage("heads"):
            logits = seg_head(unet.decoder_out, w)
            s_1st = devoxelize(logits.with_features(softmax(logits.features, axis=1)), vmap, cfg.fallback_class)
            bev_logits = bev_seg_head(bev, w)
            det = det_head(bev, w)
        return FirstStage(vmap, unet, bev, logits, s_1st, bev_logits, det)

    def semantic_scores(self, cloud: PointCloud) -> np.ndarray:
        return self.first_stage(cloud).s_1st

    def run(
        self,
        cloud: PointCloud,
        gt: Optional[GroundTruth] = None,
        tta: Optional[Sequence[RigidTransform]] = None,
        tta_workers: int = 1,
    ) -> PipelineResult:
        """Run both stages. With ``tta`` the first-stage semantic scores are
        averaged over the transforms; boxes and stage 2 use the plain pass."""
        cfg = self.config
        first = self.first_stage(cloud)
        s_1st = first.s_1st
        if tta:
            with _stage("tta"):
                s_1st = tta_infer(cloud, self.semantic_scores, tta, workers=tta_workers)
        with _stage("decode"):
            boxes = decode_boxes(first.det, self.geometry, cfg.max_boxes, cfg.score_thresh, cfg.iou_alpha)
        with _stage("stage2"):
            index = assign_points(cloud.xyz, boxes)
            local = local_transform(cloud.xyz, boxes, index)
            vox_feats = self._point_voxel_features(first)
            box_feats = (
                sample_bev(first.bev, self.geometry, np.array([b.center[:2] for b in boxes]))
                if boxes
                else np.zeros((0, first.bev.shape[0]))
            )
            s_point, s_box = second_stage_forward(local, vox_feats, box_feats, index, self.weights)
            s_2nd = fuse_s2nd(s_point, s_box, index)
            s_final = fuse_final(s_1st, s_2nd, index, self.class_map)
            panoptic = panoptic_assign(s_final, boxes, index, self.class_map)
        result = PipelineResult(s_1st, boxes, s_final, panoptic, index, s_point, s_box, s_2nd, first=first)
        if gt is not None:
            with _stage("loss"):
                result.loss = self.loss_report(cloud, first, result, gt)
        return result

    @staticmethod
    def _point_voxel_features(first: FirstStage) -> np.ndarray:
        dec = first.unet.decoder_out
        out = np.zeros((len(first.vmap.point_to_voxel), dec.channels))
        inside = first.vmap.in_range
        out[inside] = dec.features[first.vmap.point_to_voxel[inside]]
        return out

    def _bev_cell_labels(self, cloud: PointCloud, first: FirstStage, semantic: np.ndarray) -> np.ndarray:
        """Majority current-sweep label per BEV cell, ``-1`` for empty cells."""
        cfg, geom = self.config, self.geometry
        vmap = first.vmap
        use = vmap.in_range & cloud.current_mask
        coords = vmap.voxel_coords[vmap.point_to_voxel[use]]
        cell = (coords[:, 1] // cfg.downsampling) * geom.width + coords[:, 0] // cfg.downsampling
        hist = np.zeros((geom.height * geom.width, cfg.num_classes), dtype=np.int64)
        np.add.at(hist, (cell, semantic[use]), 1)
        labels = np.argmax(hist, axis=1)
        labels[hist.sum(axis=1) == 0] = -1
        return labels

    def loss_report(self, cloud: PointCloud, first: FirstStage, result: PipelineResult, gt: GroundTruth) -> TaskLossReport:
        """Every loss component against ``gt``; past-sweep points are excluded."""
        cfg, geom = self.config, self.geometry
        semantic = np.asarray(gt.semantic, dtype=np.int64)
        vox_labels = voxel_majority_labels(semantic, first.vmap, cfg.num_classes, cloud.current_mask)
        ignore = vox_labels < 0
        logits = first.voxel_logits.features
        ce_v, _ = cross_entropy(logits, vox_labels, ignore)
        lov_v, _ = lovasz_softmax(softmax(logits, axis=1), vox_labels, ignore)

        bev_labels = self._bev_cell_labels(cloud, first, semantic)
        bev_rows = first.bev_logits.reshape(cfg.num_classes, -1).T
        ce_bev, _ = cross_entropy(bev_rows, bev_labels, bev_labels < 0)
        lov_bev, _ = lovasz_softmax(softmax(bev_rows, axis=1), bev_labels, bev_labels < 0)

        targets = render_targets(gt.boxes, geom, cfg.num_thing)
        hm, _ = gaussian_focal(first.det.heatmap, targets.heatmap)
        rows, cols = targets.cells[:, 0], targets.cells[:, 1]
        reg_pred = first.det.reg[:, rows, cols].T
        reg, _ = l1_loss(reg_pred, targets.reg)
        iou_target = np.array(
            [
                bev_iou(decode_box_at(first.det.reg, r, c, geom, 0, 1.0), gt.boxes[i])
                for r, c, i in zip(rows.tolist(), cols.tolist(), targets.box_index.tolist())
            ]
        )
        iou_pred = first.det.iou[0, rows, cols]
        iou, _ = l1_loss(iou_pred, iou_target.reshape(iou_pred.shape))

        log_var = self.weights.get64("loss.log_var", (3,))
        params = UncertaintyParams(dict(zip(("SEG", "DET", "BEV"), log_var.tolist())))
        report = combine_losses(
            {"ce_v": ce_v, "lovasz_v": lov_v, "hm": hm, "reg": reg, "iou": iou, "ce_bev": ce_bev, "lovasz_bev": lov_bev},
            params,
        )
        report.extras.update(self._stage2_losses(cloud, result, gt))
        return report

    def _stage2_losses(self, cloud: PointCloud, result: PipelineResult, gt: GroundTruth) -> Dict[str, float]:
        """Box-class CE and point-mask BCE of stage 2; evaluative only.

        A decoded box is matched to the ground-truth box of highest BEV IoU
        above 0.5; unmatched boxes target the stuff entry. A point's mask
        target is 1 when it belongs to the matched ground-truth instance.
        """
        nt = self.config.num_thing
        box_targets, matched = [], []
        for b in result.boxes:
            ious = [bev_iou(b, g) for g in gt.boxes]
            best = int(np.argmax(ious)) if ious else -1
            if best >= 0 and ious[best] > 0.5:
                box_targets.append(gt.boxes[best].class_id)
                matched.append(best + 1)
            else:
                box_targets.append(nt)
                matched.append(0)
        if result.boxes:
            box_ce, _ = cross_entropy(np.log(np.clip(result.s_box, 1e-12, None)), np.array(box_targets))
        else:
            box_ce = 0.0
        sel = np.flatnonzero((result.index != NOT_IN_BOX) & cloud.current_mask)
        gt_inst = np.asarray(gt.instance)[sel]
        box_inst = np.array(matched, dtype=np.int64)[result.index[sel]] if len(sel) else np.zeros(0, dtype=np.int64)
        point_t = ((box_inst > 0) & (gt_inst == box_inst)).astype(np.float64)
        point_bce, _ = binary_cross_entropy(result.s_point[sel], point_t)
        return {"stage2_box_ce": float(box_ce), "stage2_point_bce": float(point_bce)}


def run_pipeline(
    cloud: PointCloud,
    config: PipelineConfig,
    weights: WeightStore,
    gt: Optional[GroundTruth] = None,
    tta: Optional[Sequence[RigidTransform]] = None,
) -> PipelineResult:
    return Pipeline(config, weights).run(cloud, gt, tta)
