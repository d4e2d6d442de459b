"""Single-class detection metrics and dimension error.

mAP follows the COCO recipe: greedy matching per IoU threshold, cumulative
precision/recall, 101-point interpolated AP, averaged over the 0.5:0.95
sweep.  MAPE is the mean over instances of the mean relative height and
width errors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DEFAULT_IOU_THRESHOLDS",
    "MetricReport",
    "box_iou_xyxy",
    "mask_iou",
    "evaluate_map",
    "evaluate_mape",
]

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# Recall grid i/100 (exact integer division keeps threshold comparisons
# reproducible against reference implementations).
_RECALL_GRID = np.arange(101) / 100.0


def box_iou_xyxy(a, b) -> float:
    ax1, ay1, ax2, ay2 = float(a[0]), float(a[1]), float(a[2]), float(a[3])
    bx1, by1, bx2, by2 = float(b[0]), float(b[1]), float(b[2]), float(b[3])
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a, b) -> float:
    am = np.asarray(a) > 0.5
    bm = np.asarray(b) > 0.5
    if am.shape != bm.shape:
        raise ValueError(f"mask shape mismatch {am.shape} vs {bm.shape}")
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(am, bm).sum() / union)


def _ap_101(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags in descending-score order."""
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags.astype(np.float64))
    fp = np.cumsum((~tp_flags).astype(np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    total = 0.0
    for r in _RECALL_GRID:
        sel = recall >= r
        total += float(precision[sel].max()) if sel.any() else 0.0
    return total / len(_RECALL_GRID)


def evaluate_map(detections: Sequence[Sequence],
                 ground_truth: Sequence[Sequence],
                 iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
                 kind: str = "bbox") -> float:
    """Mean AP over IoU thresholds for one class.

    ``detections[i]`` holds ``(score, box_or_mask)`` pairs for image i;
    ``ground_truth[i]`` holds that image's boxes or masks in the same
    coordinate space.  ``kind`` selects box IoU ("bbox") or pixel IoU on
    binarized masks ("segm").  An empty ground-truth set across all images
    leaves the metric undefined and returns NaN.
    """
    if kind not in ("bbox", "segm"):
        raise ValueError(f"unknown kind {kind!r}")
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground_truth must cover the same images")
    iou_fn = box_iou_xyxy if kind == "bbox" else mask_iou

    n_gt = sum(len(g) for g in ground_truth)
    if n_gt == 0:
        return math.nan

    # Flatten detections with image ids, sort once by descending score
    # (stable, so score ties keep image/detection order).
    scores, img_ids, payloads = [], [], []
    for i, dets in enumerate(detections):
        for score, obj in dets:
            scores.append(float(score))
            img_ids.append(i)
            payloads.append(obj)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable") \
        if scores else np.zeros(0, dtype=np.int64)

    # IoU of each detection against its image's GT, computed once.
    iou_rows = [np.array([iou_fn(payloads[j], g) for g in ground_truth[img_ids[j]]],
                         dtype=np.float64) for j in range(len(payloads))]

    aps = []
    for thr in iou_thresholds:
        taken = [np.zeros(len(g), dtype=bool) for g in ground_truth]
        tp_flags = np.zeros(len(order), dtype=bool)
        for rank, j in enumerate(order):
            row = iou_rows[j]
            if row.size == 0:
                continue
            used = taken[img_ids[j]]
            best, best_iou = -1, thr
            for g in range(row.size):
                if not used[g] and row[g] >= best_iou and \
                        (best < 0 or row[g] > row[best]):
                    best, best_iou = g, row[g]
            if best >= 0:
                used[best] = True
                tp_flags[rank] = True
        aps.append(_ap_101(tp_flags, n_gt))
    return float(np.mean(aps))


def _hw(obj) -> tuple:
    if hasattr(obj, "height_m"):
        return float(obj.height_m), float(obj.width_m)
    h, w = obj
    return float(h), float(w)


def evaluate_mape(estimates: Sequence, labels: Sequence) -> float:
    """Mean over instances of mean(|dh|/h_gt, |dw|/w_gt).

    Accepts dimension objects (``height_m``/``width_m`` attributes) or
    (height, width) pairs.  Non-positive labels are excluded with a warning;
    an empty pairing returns NaN.
    """
    if len(estimates) != len(labels):
        raise ValueError("estimates and labels must be aligned")
    errs = []
    excluded = 0
    for est, lab in zip(estimates, labels):
        eh, ew = _hw(est)
        lh, lw = _hw(lab)
        if lh <= 0 or lw <= 0:
            excluded += 1
            continue
        errs.append(0.5 * (abs(eh - lh) / lh + abs(ew - lw) / lw))
    if excluded:
        warnings.warn(f"excluded {excluded} instance(s) with non-positive labels")
    if not errs:
        return math.nan
    return float(np.mean(errs))


@dataclass
class MetricReport:
    bbox_map: float
    segm_map: float
    hnw_mape: float
    curves: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("bbox_map", "segm_map"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not math.isnan(self.hnw_mape) and self.hnw_mape < 0:
            raise ValueError("hnw_mape must be non-negative")

    def as_dict(self) -> dict:
        return {"bbox_map": self.bbox_map, "segm_map": self.segm_map,
                "hnw_mape": self.hnw_mape,
                "curves": {k: list(v) for k, v in self.curves.items()}}
