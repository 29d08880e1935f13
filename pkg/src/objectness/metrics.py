"""Detection and classification scoring.

Detections are matched greedily to ground truth at an IoU threshold, the
resulting TP/FP flags are swept into a precision-recall curve, and the
curve is summarized by its trapezoidal area (AUC).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bbox import iou_matrix


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int


@dataclass
class EvalReport:
    points: list
    auc: float
    total_gt: int
    detections_per_image: list = field(default_factory=list)


def _box_array(boxes) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def match_detections(dets: Sequence[Sequence], gts: Sequence[Sequence], iou_match_threshold: float = 0.5) -> list:
    """TP/FP flag for every detection, nested per image like ``dets``.

    Detections are visited in global descending score order. Each one
    claims the unmatched ground truth of its image with the highest IoU,
    provided that IoU reaches ``iou_match_threshold``; otherwise it is a
    false positive. Ties in IoU go to the lower ground-truth index.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} ground-truth lists")
    order = []
    ious = []
    for i, (image_dets, image_gts) in enumerate(zip(dets, gts)):
        scores = [d.score for d in image_dets]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"detections of image {i} are not sorted by descending score")
        ious.append(iou_matrix(_box_array([d.box for d in image_dets]), _box_array(image_gts)))
        order.extend((-s, i, j) for j, s in enumerate(scores))
    order.sort()

    flags = [[False] * len(d) for d in dets]
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    for _, i, j in order:
        if not len(gts[i]):
            continue
        cand = np.where(taken[i], -1.0, ious[i][j])
        k = int(np.argmax(cand))
        if cand[k] >= iou_match_threshold:
            taken[i][k] = True
            flags[i][j] = True
    return flags


def pr_curve(flags, scores, total_gt: int) -> list:
    """One precision-recall point per distinct score, by descending threshold."""
    if total_gt < 1:
        raise ValueError("pr_curve needs at least one ground-truth box")
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if flags.shape != scores.shape:
        raise ValueError("flags and scores must have the same length")
    order = np.argsort(-scores, kind="stable")
    flags, scores = flags[order], scores[order]
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    # last position of every run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) if len(scores) else []
    return [
        PRPoint(float(scores[e]), float(tp[e] / (tp[e] + fp[e])), float(tp[e] / total_gt), int(tp[e]), int(fp[e]))
        for e in ends
    ]


def auc(curve: Sequence[PRPoint]) -> float:
    """Trapezoidal area under a precision-recall curve.

    The curve is anchored at recall 0 with the precision of its first point,
    and contributes nothing beyond its largest recall.
    """
    if not len(curve):
        return 0.0
    pts = sorted(curve, key=lambda p: p.recall)
    r = np.array([0.0] + [p.recall for p in pts])
    p = np.array([pts[0].precision] + [p.precision for p in pts])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))


def evaluate_detections(dets, gts, iou_match_threshold: float = 0.5) -> EvalReport:
    """Full detection evaluation over a set of images."""
    total_gt = sum(len(g) for g in gts)
    flags = match_detections(dets, gts, iou_match_threshold)
    flat_flags = [f for image in flags for f in image]
    flat_scores = [d.score for image in dets for d in image]
    points = pr_curve(flat_flags, flat_scores, total_gt) if total_gt else []
    return EvalReport(points, auc(points), total_gt, [len(d) for d in dets])


REPORT_FIELDS = ("row", "threshold", "precision", "recall", "tp", "fp", "auc", "total_gt")


def write_report_csv(report: EvalReport, path) -> None:
    """One ``point`` row per PR point, then one ``summary`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for pt in report.points:
            w.writerow(["point", f"{pt.threshold:.9g}", f"{pt.precision:.9g}", f"{pt.recall:.9g}", pt.tp, pt.fp, "", ""])
        w.writerow(["summary", "", "", "", "", "", f"{report.auc:.9g}", report.total_gt])


def read_report_csv(path) -> EvalReport:
    points, auc_value, total_gt = [], 0.0, 0
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["row"] == "point":
                points.append(PRPoint(float(row["threshold"]), float(row["precision"]), float(row["recall"]),
                                      int(row["tp"]), int(row["fp"])))
            elif row["row"] == "summary":
                auc_value, total_gt = float(row["auc"]), int(row["total_gt"])
    return EvalReport(points, auc_value, total_gt)


def topk_error_from_logits(logits: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose label is not among the ``k`` largest logits.

    Ties rank the lower class index first.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if k < 1 or k > logits.shape[1]:
        raise ValueError(f"k={k} must lie in [1, {logits.shape[1]}]")
    if not len(labels):
        return 0.0
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(~np.any(top == labels[:, None], axis=1)))


def topk_error(model, records, k: int) -> float:
    """Top-k classification error of a classification-head model on ``records``."""
    from .data import load_images

    if model.config.head.kind != "classification":
        raise ValueError("topk_error needs a model with a classification head")
    if k > model.config.head.num_classes:
        raise ValueError(f"k={k} exceeds the {model.config.head.num_classes} classes")
    images = load_images(records)
    logits = model.predict_logits(images)
    return topk_error_from_logits(logits, [r.class_id for r in records], k)
