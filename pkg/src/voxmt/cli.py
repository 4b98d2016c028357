"""Command-line entry points.

Exit codes: 0 success, 1 input error, 2 configuration error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from typing import List, Optional

import numpy as np

from voxmt import io
from voxmt.config import PROFILES, load_config
from voxmt.errors import ConfigError, InputError, VoxmtError
from voxmt.metrics import miou, pq
from voxmt.model import init_weights
from voxmt.pipeline import GroundTruth, Pipeline
from voxmt.synth import synth_scene
from voxmt.tta import make_tta_set
from voxmt.weights import WeightStore

log = logging.getLogger("voxmt")


def _cmd_synth(args) -> int:
    cfg = load_config(args.config)
    scene = synth_scene(args.seed, n_objects=args.objects, n_points=args.points, config=cfg)
    io.write_pointcloud(args.out, scene.cloud)
    if args.labels:
        io.write_labels(args.labels, scene.semantic, scene.instance)
    if args.boxes:
        io.write_boxes(args.boxes, scene.boxes)
    print(f"points = {len(scene.cloud)}")
    print(f"boxes = {len(scene.boxes)}")
    return 0


def _cmd_init_weights(args) -> int:
    cfg = load_config(args.config)
    store = init_weights(cfg, args.seed)
    store.save(args.out)
    print(f"tensors = {len(store)}")
    print(f"parameters = {sum(int(np.prod(v.shape)) for v in store.values())}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    weights = WeightStore.load(args.weights)
    cloud = io.read_pointcloud(args.input)
    gt = None
    if args.gt:
        semantic, instance = io.read_labels(args.gt)
        if len(semantic) != len(cloud):
            raise InputError(f"{args.gt} labels {len(semantic)} points, {args.input} has {len(cloud)}")
        boxes = io.read_boxes(args.gt_boxes) if args.gt_boxes else []
        gt = GroundTruth(semantic, instance, boxes)
    tta = make_tta_set() if args.tta else None
    result = Pipeline(cfg, weights).run(cloud, gt, tta, tta_workers=args.workers)
    io.write_panoptic(args.out, *result.panoptic)
    if args.boxes:
        io.write_boxes(args.boxes, result.boxes)
    print(f"points = {len(cloud)}")
    print(f"boxes = {len(result.boxes)}")
    print(f"instances = {int(result.panoptic.instance.max(initial=0))}")
    if result.loss is not None:
        sys.stdout.write(result.loss.to_text())
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    pred = io.read_panoptic(args.pred)
    gt = io.read_labels(args.gt)
    if len(pred[0]) != len(gt[0]):
        raise InputError(f"prediction labels {len(pred[0])} points, ground truth {len(gt[0])}")
    ious, mean = miou(pred[0], gt[0], cfg.num_classes)
    res = pq(pred, gt, cfg.thing_classes, cfg.stuff_classes)
    rows = [("miou", mean)]
    rows += [(f"iou_{c}", v) for c, v in enumerate(ious)]
    rows += [("pq", res.pq), ("sq", res.sq), ("rq", res.rq), ("pq_class_mean", res.pq_class_mean)]
    for c, stats in res.per_class.items():
        rows += [(f"pq_{c}", stats.pq), (f"sq_{c}", stats.sq), (f"rq_{c}", stats.rq)]
    for key, value in rows:
        print(f"{key} = {value:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            writer.writerows(rows)
    return 0


def _cmd_selftest(args) -> int:
    from voxmt.selftest import run_all

    return 0 if run_all(only=args.only) else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxmt", description="Multi-task LiDAR segmentation and detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    profiles = ", ".join(sorted(PROFILES))

    p = sub.add_parser("synth", help="write a seeded synthetic scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="point cloud output (.pcb)")
    p.add_argument("--labels", help="ground-truth labels output (.lbl)")
    p.add_argument("--boxes", help="ground-truth boxes output (.box)")
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--config", default="toy", help=f"config file or profile ({profiles})")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("init-weights", help="write seeded random weights for a config")
    p.add_argument("--config", default="toy", help=f"config file or profile ({profiles})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="weights output (.wts)")
    p.set_defaults(func=_cmd_init_weights)

    p = sub.add_parser("run", help="run the full pipeline on a point cloud")
    p.add_argument("--config", required=True, help=f"config file or profile ({profiles})")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="point cloud (.pcb)")
    p.add_argument("--out", required=True, help="panoptic output (.pan)")
    p.add_argument("--boxes", help="decoded boxes output (.box)")
    p.add_argument("--tta", action="store_true", help="average semantic scores over the 20 test-time transforms")
    p.add_argument("--workers", type=int, default=1, help="threads for TTA variants")
    p.add_argument("--gt", help="ground-truth labels (.lbl); prints the loss report")
    p.add_argument("--gt-boxes", help="ground-truth boxes (.box) for the detection losses")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="mIoU and PQ of a prediction against ground truth")
    p.add_argument("--pred", required=True, help="panoptic prediction (.pan)")
    p.add_argument("--gt", required=True, help="ground-truth labels (.lbl)")
    p.add_argument("--config", default="toy", help="config supplying the class taxonomy")
    p.add_argument("--csv", help="also write metrics as CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("selftest", help="run every randomized oracle check")
    p.add_argument("--only", type=int, nargs="*", help="check numbers to run")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except VoxmtError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
