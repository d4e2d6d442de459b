"""Training losses: segmentation BCE, smooth-L1 box/dimension regression,
cross-entropy classification, the corner-alignment loss, and their unweighted
sum.

Every scalar loss here works on both numpy arrays (float64 reference path,
used by the oracle tests) and torch tensors (training path with autograd);
the two paths share one code body so they cannot drift.

The corner-alignment pipeline (Harris corners -> DBSCAN clusters -> canny
edge centroids -> 1 - R^2) is inherently non-differentiable; training uses a
straight-through wrapper that keeps the exact forward value and routes
gradients through a probability-weighted-centroid surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
import torch
from sklearn.cluster import DBSCAN

from .data import DimensionLabel

_EPS = 1e-7


def _is_tensor(x) -> bool:
    return isinstance(x, torch.Tensor)


def _clamp(x, lo, hi):
    return torch.clamp(x, lo, hi) if _is_tensor(x) else np.clip(x, lo, hi)


def _log(x):
    return torch.log(x) if _is_tensor(x) else np.log(x)


def _where(c, a, b):
    return torch.where(c, a, b) if _is_tensor(c) else np.where(c, a, b)


def _mean(x):
    return x.mean() if _is_tensor(x) else np.mean(x)


def bce_segmentation_loss(pred, target):
    """Mean per-pixel binary cross entropy; pred clamped to [1e-7, 1-1e-7]."""
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes must match")
    p = _clamp(pred, _EPS, 1.0 - _EPS)
    y = target
    return _mean(-(y * _log(p) + (1 - y) * _log(1 - p)))


def smooth_l1(pred, target):
    """Standard smooth-L1 (0.5 x^2 inside |x|<1, |x|-0.5 outside), mean."""
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes must match")
    d = pred - target
    ad = torch.abs(d) if _is_tensor(d) else np.abs(d)
    return _mean(_where(ad < 1.0, 0.5 * d * d, ad - 0.5))


def hnw_loss(estimate, label):
    """Smooth-L1 on the (height, width) pair in meters.

    Accepts a single (DimensionEstimate-like, DimensionLabel) pair of
    objects with height/width attributes, or array/tensor batches of shape
    (..., 2) ordered (height, width)."""
    if hasattr(estimate, "height_m"):
        estimate = np.array([estimate.height_m, estimate.width_m], dtype=np.float64)
    if isinstance(label, DimensionLabel):
        label = np.array(label.as_hw(), dtype=np.float64)
    if _is_tensor(estimate) and not _is_tensor(label):
        label = torch.as_tensor(label, dtype=estimate.dtype)
    return smooth_l1(estimate, label)


def classification_loss(scores, gt_classes):
    """Mean cross entropy over matched anchors.

    `scores`: per-anchor probability distributions, shape (n, n_classes);
    `gt_classes`: integer labels (background is a class). Returns
    (loss, no_match_flag); with zero anchors the loss is 0 and the flag set.
    """
    n = scores.shape[0] if hasattr(scores, "shape") else len(scores)
    if n == 0:
        return (scores.sum() * 0.0 if _is_tensor(scores) else 0.0), True
    if _is_tensor(scores):
        idx = torch.as_tensor(gt_classes, dtype=torch.long)
        p = torch.clamp(scores[torch.arange(n), idx], _EPS, 1.0)
        return -torch.log(p).mean(), False
    scores = np.asarray(scores)
    idx = np.asarray(gt_classes, dtype=np.int64)
    p = np.clip(scores[np.arange(n), idx], _EPS, 1.0)
    return float(-np.mean(np.log(p))), False


# ---------------------------------------------------------------------------
# corner-alignment loss

@dataclass(frozen=True)
class CornerParams:
    harris_block: int = 2
    harris_ksize: int = 3
    harris_k: float = 0.04
    response_threshold_frac: float = 0.01
    dbscan_eps: float = 5.0
    dbscan_min_samples: int = 3
    radius_px: float = 8.0
    canny_lo: int = 50
    canny_hi: int = 150

    def for_resolution(self, height: int, width: int) -> "CornerParams":
        """Radius scales with resolution (8 px is the 128x128 default)."""
        return replace(self, radius_px=self.radius_px * min(height, width) / 128.0)


@dataclass(frozen=True)
class CornerClusterSet:
    """Centroids of clustered Harris corners of one ground-truth mask."""

    centroids: tuple[tuple[float, float], ...]  # (x, y) pixels
    radius_px: float
    source_mask_id: int = 0

    def __post_init__(self):
        if not self.radius_px > 0:
            raise ValueError("radius_px must be positive")

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def empty(self) -> bool:
        return len(self.centroids) == 0


def _binarize(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask, dtype=np.float64) > 0.5).astype(np.uint8)


def detect_corner_clusters(gt_mask: np.ndarray,
                           params: CornerParams | None = None) -> CornerClusterSet:
    """Harris corners of the mask raster, clustered by DBSCAN into centroids.

    Empty (all-zero) masks are a precondition violation; a mask with no
    corner response yields an empty set (the emptiness is the flag).
    """
    params = params or CornerParams()
    mask = _binarize(gt_mask)
    if not mask.any():
        raise ValueError("gt_mask is empty")
    resp = cv2.cornerHarris(mask.astype(np.float32), params.harris_block,
                            params.harris_ksize, params.harris_k)
    peak = float(resp.max())
    if peak <= 0:
        return CornerClusterSet(centroids=(), radius_px=params.radius_px)
    rows, cols = np.nonzero(resp > params.response_threshold_frac * peak)
    if len(rows) == 0:
        return CornerClusterSet(centroids=(), radius_px=params.radius_px)
    pts = np.stack([cols, rows], axis=1).astype(np.float64)  # (x, y)
    labels = DBSCAN(eps=params.dbscan_eps,
                    min_samples=params.dbscan_min_samples).fit(pts).labels_
    groups = [pts[labels == lab] for lab in sorted(set(labels)) if lab != -1]
    cents = [g.mean(axis=0) for g in groups]
    # enforce the pairwise-separation invariant by merging close centroids
    merged = True
    while merged and len(cents) > 1:
        merged = False
        for i in range(len(cents)):
            for j in range(i + 1, len(cents)):
                if np.hypot(*(cents[i] - cents[j])) <= params.dbscan_eps:
                    groups[i] = np.vstack([groups[i], groups[j]])
                    cents[i] = groups[i].mean(axis=0)
                    del groups[j], cents[j]
                    merged = True
                    break
            if merged:
                break
    cents.sort(key=lambda c: (c[1], c[0]))
    return CornerClusterSet(centroids=tuple((float(x), float(y)) for x, y in cents),
                            radius_px=params.radius_px)


def _canny_edges(mask_bin: np.ndarray, params: CornerParams) -> np.ndarray:
    return cv2.Canny(mask_bin * 255, params.canny_lo, params.canny_hi) > 0


def _disk_indices(cx: float, cy: float, radius: float, h: int, w: int):
    x0, x1 = max(int(cx - radius) - 1, 0), min(int(cx + radius) + 2, w)
    y0, y1 = max(int(cy - radius) - 1, 0), min(int(cy + radius) + 2, h)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    keep = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    return ys[keep], xs[keep]


def corner_alignment_loss(pred_mask: np.ndarray, gt_mask: np.ndarray,
                          clusters: CornerClusterSet,
                          params: CornerParams | None = None) -> float:
    """Mean per-cluster alignment penalty in [0, 1].

    Per cluster, the canny-edge pixels of each mask inside the radius disk
    about the cluster centroid are reduced to a centroid; clusters with no
    predicted edge pixel in the disk cost exactly 1. Across the remaining
    clusters, R^2 (coefficient of determination of predicted corner
    positions against ground-truth corner positions, floored at 0) gives a
    shared cluster loss of 1 - R^2. The total is the mean over clusters.
    Empty cluster sets cost 0 (nothing to align).
    """
    params = params or CornerParams()
    if clusters.empty:
        return 0.0
    pred_bin = _binarize(pred_mask)
    gt_bin = _binarize(gt_mask)
    if pred_bin.shape != gt_bin.shape:
        raise ValueError("pred and gt mask shapes must match")
    h, w = gt_bin.shape
    pred_edges = _canny_edges(pred_bin, params)
    gt_edges = _canny_edges(gt_bin, params)

    gt_pts, pred_pts, misses = [], [], 0
    for cx, cy in clusters.centroids:
        ys, xs = _disk_indices(cx, cy, clusters.radius_px, h, w)
        g = gt_edges[ys, xs]
        if g.any():
            gt_corner = np.array([xs[g].mean(), ys[g].mean()])
        else:
            gt_corner = np.array([cx, cy])  # degenerate disk: fall back to centroid
        p = pred_edges[ys, xs]
        if not p.any():
            misses += 1
            continue
        gt_pts.append(gt_corner)
        pred_pts.append(np.array([xs[p].mean(), ys[p].mean()]))

    n = len(clusters)
    if not gt_pts:
        return 1.0  # every cluster missed
    gt_arr = np.array(gt_pts)
    pred_arr = np.array(pred_pts)
    ss_res = float(((pred_arr - gt_arr) ** 2).sum())
    ss_tot = float(((gt_arr - gt_arr.mean(axis=0)) ** 2).sum())
    if ss_tot < 1e-12:
        r2 = 1.0 if ss_res < 1e-12 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    cluster_loss = 1.0 - max(r2, 0.0)
    return (len(gt_pts) * cluster_loss + misses * 1.0) / n


def corner_alignment_loss_torch(pred_probs: torch.Tensor, gt_mask: np.ndarray,
                                clusters: CornerClusterSet,
                                params: CornerParams | None = None) -> torch.Tensor:
    """Straight-through corner loss: exact forward value, surrogate gradient.

    The surrogate pulls the probability-weighted centroid of each radius
    disk toward the ground-truth edge centroid and raises in-disk mass for
    missed clusters, so the mask probabilities receive a useful gradient
    even though Harris/DBSCAN/canny are non-differentiable.
    """
    params = params or CornerParams()
    exact = corner_alignment_loss(pred_probs.detach().cpu().numpy(),
                                  gt_mask, clusters, params)
    if clusters.empty:
        return pred_probs.sum() * 0.0 + exact
    h, w = gt_mask.shape
    gt_edges = _canny_edges(_binarize(gt_mask), params)
    terms = []
    r2 = clusters.radius_px ** 2
    for cx, cy in clusters.centroids:
        ys, xs = _disk_indices(cx, cy, clusters.radius_px, h, w)
        g = gt_edges[ys, xs]
        target = (np.array([xs[g].mean(), ys[g].mean()]) if g.any()
                  else np.array([cx, cy]))
        probs = pred_probs[torch.as_tensor(ys), torch.as_tensor(xs)]
        mass = probs.sum()
        if float(mass.detach()) < 1e-6:
            terms.append(1.0 - probs.mean())
            continue
        px = (probs * torch.as_tensor(xs, dtype=probs.dtype)).sum() / mass
        py = (probs * torch.as_tensor(ys, dtype=probs.dtype)).sum() / mass
        d2 = ((px - target[0]) ** 2 + (py - target[1]) ** 2) / r2
        terms.append(torch.clamp(d2, max=1.0))
    surrogate = torch.stack([t if isinstance(t, torch.Tensor)
                             else torch.tensor(t) for t in terms]).mean()
    return surrogate + (exact - surrogate.detach())


# ---------------------------------------------------------------------------
# total loss

@dataclass
class LossReport:
    l_seg: object
    l_corner: object
    l_hnw: object
    l_bbox: object
    l_cls: object
    l_total: object

    CSV_HEADER = "step,l_seg,l_corner,l_hnw,l_bbox,l_cls,l_total"

    def __post_init__(self):
        parts = (self.l_seg, self.l_corner, self.l_hnw, self.l_bbox, self.l_cls)
        total = sum(_to_float(p) for p in parts)
        tol = 1e-9 if all(_f64(p) for p in parts) else 1e-5
        if abs(_to_float(self.l_total) - total) > tol * max(1.0, abs(total)):
            raise ValueError("l_total does not equal the sum of its parts")
        for name in ("l_seg", "l_corner", "l_hnw", "l_bbox", "l_cls"):
            if _to_float(getattr(self, name)) < -tol:
                raise ValueError(f"{name} must be non-negative")

    def as_floats(self) -> dict[str, float]:
        return {k: _to_float(getattr(self, k))
                for k in ("l_seg", "l_corner", "l_hnw", "l_bbox", "l_cls", "l_total")}

    def csv_row(self, step: int) -> str:
        f = self.as_floats()
        return (f"{step},{f['l_seg']:.9g},{f['l_corner']:.9g},{f['l_hnw']:.9g},"
                f"{f['l_bbox']:.9g},{f['l_cls']:.9g},{f['l_total']:.9g}")


def _to_float(x) -> float:
    if isinstance(x, torch.Tensor):
        return float(x.detach())
    return float(x)


def _f64(x) -> bool:
    if isinstance(x, torch.Tensor):
        return x.dtype == torch.float64
    return True  # python floats / numpy float64


def _zero_like(ref):
    if isinstance(ref, torch.Tensor):
        return ref.sum() * 0.0
    return 0.0


def total_loss(*, seg_pred, seg_target, box_pred=None, box_target=None,
               class_probs=None, gt_classes=None, dim_pred=None, dim_target=None,
               pred_masks=None, gt_masks=None, corner_params=None,
               enable_corner: bool = True) -> LossReport:
    """Unweighted sum L_total = L_seg + L_corner + L_hnw + L_bbox + L_cls.

    With the corner term disabled, its component is exactly 0 and the total
    reduces to the four-term variant. `pred_masks`/`gt_masks` are parallel
    per-instance lists; corner clusters are recomputed from each gt mask.
    """
    l_seg = bce_segmentation_loss(seg_pred, seg_target)
    l_bbox = (smooth_l1(box_pred, box_target)
              if box_pred is not None and _size(box_pred) else _zero_like(l_seg))
    if class_probs is not None:
        l_cls, _ = classification_loss(class_probs, gt_classes)
    else:
        l_cls = _zero_like(l_seg)
    l_hnw = (smooth_l1(dim_pred, dim_target)
             if dim_pred is not None and _size(dim_pred) else _zero_like(l_seg))
    params = corner_params or CornerParams()
    if enable_corner and pred_masks:
        vals = []
        for pm, gm in zip(pred_masks, gt_masks):
            clusters = detect_corner_clusters(gm, params)
            if isinstance(pm, torch.Tensor):
                vals.append(corner_alignment_loss_torch(pm, gm, clusters, params))
            else:
                vals.append(corner_alignment_loss(pm, gm, clusters, params))
        l_corner = (torch.stack(vals).mean() if isinstance(vals[0], torch.Tensor)
                    else float(np.mean(vals)))
    else:
        l_corner = _zero_like(l_seg)
    l_total = l_seg + l_corner + l_hnw + l_bbox + l_cls
    return LossReport(l_seg=l_seg, l_corner=l_corner, l_hnw=l_hnw,
                      l_bbox=l_bbox, l_cls=l_cls, l_total=l_total)


def _size(x) -> int:
    return x.numel() if isinstance(x, torch.Tensor) else np.asarray(x).size
