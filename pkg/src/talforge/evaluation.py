"""Detection scoring: temporal IoU, per-class average precision with
greedy matching, and mean mAP over the IoU threshold ladder
0.50, 0.55, ..., 0.95.

AP uses the all-points monotone-envelope interpolation of the
precision-recall curve.  Classes with no ground-truth instances are
excluded from the class mean rather than scored zero; score ties break
by stable input order.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .config import EvalConfig
from .records import AnnotationSet, Detection, Proposal


def iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal intersection-over-union of two [start, end] segments."""
    a_start, a_end = a
    b_start, b_end = b
    if not (a_start < a_end and b_start < b_end):
        raise ValueError(f"degenerate segment: {a} vs {b}")
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the non-increasing envelope of the PR curve."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mprec[changed + 1]))


def _pr_curve(dets: list[tuple[str, float, tuple[float, float]]],
              gts: dict[str, list[tuple[float, float]]],
              iou_thr: float) -> tuple[np.ndarray, np.ndarray]:
    """Precision/recall after each detection, score-descending with stable
    tie order; greedy best-IoU matching, one match per ground truth."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise ValueError("no ground-truth instances for this class")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    matched = {vid: np.zeros(len(segs), dtype=bool) for vid, segs in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        vid, _, seg = dets[i]
        best_iou, best_j = 0.0, -1
        for j, gseg in enumerate(gts.get(vid, [])):
            if matched[vid][j]:
                continue
            v = iou(seg, gseg)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            matched[vid][best_j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(dets) + 1)
    recall = cum_tp / n_gt
    return precision, recall


def average_precision(dets: list[tuple[str, float, tuple[float, float]]],
                      gts: dict[str, list[tuple[float, float]]],
                      iou_thr: float) -> float:
    """AP for one class; raises if the class has no ground truth."""
    if sum(len(v) for v in gts.values()) == 0:
        raise ValueError("no ground-truth instances for this class")
    if not dets:
        return 0.0
    precision, recall = _pr_curve(dets, gts, iou_thr)
    return _interpolated_ap(precision, recall)


def _group_by_class(detections: dict[str, list[Detection]],
                    gts: AnnotationSet):
    det_by_class: dict[str, list] = {}
    for vid in sorted(detections):
        for det in detections[vid]:
            det_by_class.setdefault(det.label, []).append(
                (vid, det.score, (det.proposal.t_start, det.proposal.t_end)))
    gt_by_class: dict[str, dict[str, list]] = {}
    for vid, va in gts.videos.items():
        for label, s, e in va.instances:
            gt_by_class.setdefault(label, {}).setdefault(vid, []).append((s, e))
    return det_by_class, gt_by_class


def mean_map(detections: dict[str, list[Detection]], gts: AnnotationSet,
             cfg: EvalConfig | None = None):
    """Returns (per_threshold mAP dict, mean mAP, per_class AP table).

    The class vocabulary comes from the ground truth; mAP at each
    threshold is the mean AP over classes that have instances.
    """
    cfg = cfg or EvalConfig()
    if gts.num_instances() == 0:
        raise ValueError("empty ground-truth set")
    det_by_class, gt_by_class = _group_by_class(detections, gts)
    classes = sorted(gt_by_class)

    per_class: dict[str, dict[float, float]] = {c: {} for c in classes}
    per_thr: dict[float, float] = {}
    for thr in cfg.iou_thresholds:
        aps = []
        for c in classes:
            ap = average_precision(det_by_class.get(c, []), gt_by_class[c], thr)
            per_class[c][thr] = ap
            aps.append(ap)
        per_thr[thr] = float(np.mean(aps))
    return per_thr, float(np.mean(list(per_thr.values()))), per_class


def average_recall_at_k(proposals: dict[str, list[Proposal]], gts: AnnotationSet,
                        k: int, iou_thr: float) -> float:
    """Fraction of ground-truth instances covered (IoU >= thr) by the
    top-k scored proposals of their video."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total, hit = 0, 0
    for vid, va in gts.videos.items():
        pool = sorted(proposals.get(vid, []), key=lambda p: -p.score)[:k]
        for _, s, e in va.instances:
            total += 1
            if any(iou((p.t_start, p.t_end), (s, e)) >= iou_thr for p in pool):
                hit += 1
    return hit / total if total else 0.0


# ----------------------------------------------------------------------
# report emission

def metrics_report(detections: dict[str, list[Detection]], gts: AnnotationSet,
                   cfg: EvalConfig | None = None) -> dict:
    per_thr, avg, per_class = mean_map(detections, gts, cfg)
    return {
        "per_threshold": {f"{thr:.2f}": v for thr, v in per_thr.items()},
        "average_mAP": avg,
        "per_class": {c: {f"{thr:.2f}": v for thr, v in table.items()}
                      for c, table in per_class.items()},
    }


def write_metrics(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def write_pr_curves(detections: dict[str, list[Detection]], gts: AnnotationSet,
                    iou_thr: float, out_dir) -> None:
    """One CSV per class with columns recall, precision."""
    import os

    det_by_class, gt_by_class = _group_by_class(detections, gts)
    os.makedirs(out_dir, exist_ok=True)
    for c in sorted(gt_by_class):
        dets = det_by_class.get(c, [])
        path = os.path.join(out_dir, f"pr_{c}.csv")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["recall", "precision"])
            if dets:
                precision, recall = _pr_curve(dets, gt_by_class[c], iou_thr)
                for r, p in zip(recall, precision):
                    writer.writerow([repr(float(r)), repr(float(p))])
