"""Sequence inference, greedy track association, and consistency reporting.

A video is treated as an ordered frame list.  Each frame yields at most one
primary estimate (right-most fully visible board, the same policy that
labels the synthetic scenes); tracks are chains of consecutive-frame
detections whose boxes overlap.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .metrics import box_iou_xyxy
from .model import PmodeNet, infer_frame, load_checkpoint

__all__ = [
    "FrameEstimate", "TrackEstimate", "select_primary", "infer_sequence",
    "associate_tracks", "semantic_consistency_report", "render_overlay",
    "write_dims_csv",
]


@dataclass
class FrameEstimate:
    frame_index: int
    box: tuple                  # normalized xyxy
    width_m: float
    height_m: float
    score: float
    box_px: tuple = ()          # pixel xyxy in the source frame
    mask: np.ndarray | None = None
    track_id: int | None = None


def _cv(values) -> float:
    """Coefficient of variation, sample std over mean; 0 when undefined."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2 or np.all(arr == arr[0]):
        return 0.0
    mean = float(arr.mean())
    if mean <= 1e-12:
        return 0.0
    return float(arr.std(ddof=1) / mean)


@dataclass
class TrackEstimate:
    track_id: int
    observations: list = field(default_factory=list)  # (frame_index, w_m, h_m)

    def __post_init__(self):
        if not self.observations:
            raise ValueError("a track needs at least one observation")

    @property
    def cv_width(self) -> float:
        return _cv([w for _, w, _ in self.observations])

    @property
    def cv_height(self) -> float:
        return _cv([h for _, _, h in self.observations])


def select_primary(detections, margin: float = 0.01):
    """Index of the right-most detection fully inside the frame, else None."""
    best, best_cx = None, -math.inf
    for i, (cand, _, _) in enumerate(detections):
        x1, y1, x2, y2 = cand.box
        if x1 < margin or y1 < margin or x2 > 1 - margin or y2 > 1 - margin:
            continue
        cx = 0.5 * (x1 + x2)
        if cx > best_cx:
            best, best_cx = i, cx
    return best


def _read_frame(item):
    if isinstance(item, np.ndarray):
        return item
    bgr = cv2.imread(str(item), cv2.IMREAD_COLOR)
    if bgr is None:
        return None
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def infer_sequence(frames, checkpoint, depth_mode: str | None = None,
                   depths=None) -> list:
    """Run per-frame inference; entry i is a FrameEstimate or None.

    `frames` holds image paths or RGB arrays; unreadable entries are skipped
    with a warning.  `checkpoint` is a PmodeNet or a checkpoint path.
    """
    model = checkpoint if isinstance(checkpoint, PmodeNet) \
        else load_checkpoint(checkpoint)[0]
    model.eval()
    size = model.config.input_size
    results = []
    for idx, item in enumerate(frames):
        image = _read_frame(item)
        if image is None:
            warnings.warn(f"frame {idx} unreadable, skipped")
            results.append(None)
            continue
        h0, w0 = image.shape[:2]
        net_in = image if (h0, w0) == (size, size) else \
            cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
        depth = None
        if depths is not None and idx < len(depths) and depths[idx] is not None:
            depth = np.asarray(depths[idx], dtype=np.float64)
            if depth.shape != (size, size):
                depth = cv2.resize(depth, (size, size),
                                   interpolation=cv2.INTER_LINEAR)
        dets = infer_frame(model, net_in, depth=depth, depth_mode=depth_mode)
        pick = select_primary(dets)
        if pick is None:
            results.append(None)
            continue
        cand, mask, est = dets[pick]
        x1, y1, x2, y2 = cand.box
        results.append(FrameEstimate(
            frame_index=idx, box=cand.box, width_m=est.width_m,
            height_m=est.height_m, score=cand.class_score,
            box_px=(x1 * w0, y1 * h0, x2 * w0, y2 * h0), mask=mask))
    return results


def associate_tracks(per_frame, iou_threshold: float = 0.3) -> list:
    """Greedy IoU association over consecutive frames.

    `per_frame` is a list over frames; each entry is a FrameEstimate, a list
    of them, or None.  Estimates get their track_id assigned in place.
    """
    tracks: list[dict] = []
    active: list[int] = []      # track indices alive in the previous frame
    for frame_pos, entry in enumerate(per_frame):
        if entry is None:
            ests = []
        elif isinstance(entry, FrameEstimate):
            ests = [entry]
        else:
            ests = [e for e in entry if e is not None]
        pairs = []
        for ti in active:
            for j, est in enumerate(ests):
                iou = box_iou_xyxy(tracks[ti]["last_box"], est.box)
                if iou >= iou_threshold:
                    pairs.append((-iou, ti, j))
        pairs.sort()
        used_t, used_e = set(), set()
        next_active = []
        for neg_iou, ti, j in pairs:
            if ti in used_t or j in used_e:
                continue
            used_t.add(ti)
            used_e.add(j)
            est = ests[j]
            est.track_id = tracks[ti]["id"]
            tracks[ti]["obs"].append((est.frame_index, est.width_m, est.height_m))
            tracks[ti]["last_box"] = est.box
            next_active.append(ti)
        for j, est in enumerate(ests):
            if j in used_e:
                continue
            est.track_id = len(tracks)
            tracks.append({"id": len(tracks), "last_box": est.box,
                           "obs": [(est.frame_index, est.width_m, est.height_m)]})
            next_active.append(len(tracks) - 1)
        active = next_active
    return [TrackEstimate(track_id=t["id"], observations=t["obs"])
            for t in tracks]


def semantic_consistency_report(tracks, threshold: float = 0.15) -> dict:
    """Per-track dimension CVs with a pass flag at the given threshold."""
    if not tracks:
        raise ValueError("need at least one track")
    rows, cvs = [], []
    excluded = 0
    for t in tracks:
        single = len(t.observations) < 2
        row = {"track_id": t.track_id, "n_obs": len(t.observations),
               "cv_width": t.cv_width, "cv_height": t.cv_height,
               "excluded_single_obs": single}
        rows.append(row)
        if single:
            excluded += 1
        else:
            cvs.extend([t.cv_width, t.cv_height])
    max_cv = max(cvs) if cvs else 0.0
    mean_cv = float(np.mean(cvs)) if cvs else 0.0
    return {"tracks": rows, "max_cv": max_cv, "mean_cv": mean_cv,
            "threshold": threshold, "excluded_single_obs": excluded,
            "passed": bool(max_cv <= threshold)}


_STRIP_H = 18


def render_overlay(frame: np.ndarray, estimates) -> np.ndarray:
    """Status strip on top plus mask tint / box / dimension text per estimate."""
    h, w = frame.shape[:2]
    canvas = frame.copy()
    for est in estimates:
        if est is None:
            continue
        if est.mask is not None:
            mask = est.mask
            if mask.shape != (h, w):
                mask = cv2.resize(mask.astype(np.float32), (w, h),
                                  interpolation=cv2.INTER_LINEAR)
            region = mask > 0.5
            tint = canvas[region].astype(np.float64)
            tint = 0.65 * tint + 0.35 * np.array([40.0, 220.0, 90.0])
            canvas[region] = np.round(tint).astype(np.uint8)
        x1, y1, x2, y2 = [int(round(v)) for v in
                          (est.box_px if est.box_px else
                           (est.box[0] * w, est.box[1] * h,
                            est.box[2] * w, est.box[3] * h))]
        cv2.rectangle(canvas, (x1, y1), (x2, y2), (255, 230, 40), 1)
        text = f"W: {est.width_m:.2f}m H: {est.height_m:.2f}m"
        cv2.putText(canvas, text, (x1, max(y1 - 4, 10)),
                    cv2.FONT_HERSHEY_SIMPLEX, 0.35, (255, 230, 40), 1,
                    cv2.LINE_AA)
    strip = np.zeros((_STRIP_H, w, 3), dtype=np.uint8)
    n = sum(1 for e in estimates if e is not None)
    cv2.putText(strip, f"boards: {n}", (4, 13), cv2.FONT_HERSHEY_SIMPLEX,
                0.35, (255, 255, 255), 1, cv2.LINE_AA)
    return np.vstack([strip, canvas])


def write_dims_csv(path, estimates) -> None:
    """frame_index,track_id,x1,y1,x2,y2,width_m,height_m,score rows."""
    lines = ["frame_index,track_id,x1,y1,x2,y2,width_m,height_m,score"]
    for est in estimates:
        if est is None:
            continue
        x1, y1, x2, y2 = est.box_px if est.box_px else est.box
        tid = est.track_id if est.track_id is not None else -1
        lines.append("%d,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g" % (
            est.frame_index, tid, x1, y1, x2, y2,
            est.width_m, est.height_m, est.score))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
