"""Training loop and evaluation driver.

One optimizer step per mini-batch of frames; each frame contributes the
five-part composite loss.  Validation runs on a track-held-out split:
boards keep their three consecutive frames on one side of the split so a
network never scores a geometry it trained on.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .augment import AugmentConfig, augment_frame
from .data import (
    AnnotatedFrame,
    DimensionLabel,
    load_dataset,
    polygon_bbox,
    polygon_to_mask,
    resize_frame,
)
from .losses import CornerParams, LossReport, total_loss
from .metrics import MetricReport, box_iou_xyxy, evaluate_map, evaluate_mape
from .model import (
    DimensionEstimate,
    NetworkConfig,
    PmodeNet,
    crop_mask,
    encode_boxes,
    infer_frame,
    match_anchors,
    preprocess,
    save_checkpoint,
)
from .scene import load_depth_raster

__all__ = [
    "TrainConfig", "TrainResult", "TrainingDiverged", "FrameStore",
    "split_by_track", "train", "validate", "run_ablation",
]


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; the last good checkpoint survives."""

    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "runs/exp"
    label: str = ""
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_schedule: str = "cosine"        # "cosine" | "constant"
    seed: int = 0
    val_fraction: float = 0.2
    eval_interval: int = 1
    corner_loss_enabled: bool = True
    corner_weight: float = 0.25        # auxiliary term scale in the total
    dim_lr_scale: float = 1.0          # extra LR on the (detached) MLP head
    depth_mode: str | None = None      # None | "multiply"
    deterministic: bool = True
    max_steps: int | None = None       # optional hard cap, mostly for smokes
    network: NetworkConfig = field(default_factory=NetworkConfig.desk)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.depth_mode not in (None, "multiply"):
            raise ValueError("depth_mode must be None or 'multiply'")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.corner_weight < 0:
            raise ValueError("corner_weight must be >= 0")
        if self.dim_lr_scale <= 0:
            raise ValueError("dim_lr_scale must be positive")

    def to_json(self, path) -> None:
        doc = dataclasses.asdict(self)
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        net = doc.pop("network", None)
        aug = doc.pop("augment", None)
        kwargs = dict(doc)
        if net is not None:
            for key in ("mlp_hidden", "anchor_ratios"):
                if key in net and isinstance(net[key], list):
                    net[key] = tuple(net[key])
            kwargs["network"] = NetworkConfig(**net)
        if aug is not None:
            for key in ("hsv_shift", "jpeg_quality_range"):
                if key in aug and isinstance(aug[key], list):
                    aug[key] = tuple(aug[key])
            kwargs["augment"] = AugmentConfig(**aug)
        return cls(**kwargs)


@dataclass
class TrainResult:
    best_checkpoint: Path
    report: MetricReport
    history: list
    loss_log: Path
    diverged: bool = False


class FrameStore:
    """Frames + annotations from a manifest, resized to the network input."""

    def __init__(self, manifest_path, input_size: int, depth_mode: str | None = None):
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise FileNotFoundError(manifest_path)
        self.manifest = load_dataset(manifest_path)
        self.base_dir = manifest_path.parent
        self.input_size = int(input_size)
        self.depth_mode = depth_mode
        self._by_image: dict[int, list] = {}
        for ann in self.manifest.annotations:
            self._by_image.setdefault(ann.image_id, []).append(ann)
        self.image_ids = [fr.id for fr in self.manifest.frames]

    def __len__(self) -> int:
        return len(self.image_ids)

    def track_of(self, image_id: int):
        anns = self._by_image.get(image_id, [])
        return anns[0].track_id if anns else None

    def load(self, image_id: int) -> AnnotatedFrame:
        rec = self.manifest.frame_by_id(image_id)
        bgr = cv2.imread(str(self.base_dir / rec.file), cv2.IMREAD_COLOR)
        if bgr is None:
            raise FileNotFoundError(self.base_dir / rec.file)
        image = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
        anns = self._by_image.get(image_id, [])
        frame = AnnotatedFrame(
            image=image,
            polygons=[a.polygon_array() for a in anns],
            labels=[a.label() for a in anns],
            occluded_flags=[a.occluded for a in anns],
            track_id=anns[0].track_id if anns else None,
            frame_index=rec.frame_index)
        if frame.height != self.input_size or frame.width != self.input_size:
            frame = resize_frame(frame, (self.input_size, self.input_size))
        return frame

    def load_depth(self, image_id: int) -> np.ndarray | None:
        if self.depth_mode is None:
            return None
        rec = self.manifest.frame_by_id(image_id)
        stem = Path(rec.file).stem.replace("frame_", "depth_")
        path = self.base_dir / f"{stem}.f32"
        if not path.exists():
            return None
        depth = load_depth_raster(path)
        if depth.shape != (self.input_size, self.input_size):
            depth = cv2.resize(depth, (self.input_size, self.input_size),
                               interpolation=cv2.INTER_LINEAR)
        return depth.astype(np.float64)


def split_by_track(store: FrameStore, val_fraction: float,
                   seed: int) -> tuple[list, list]:
    """80/20 frame split keeping every track's frames on one side."""
    groups: dict = {}
    for image_id in store.image_ids:
        tid = store.track_of(image_id)
        key = ("t", tid) if tid is not None else ("f", image_id)
        groups.setdefault(key, []).append(image_id)
    keys = sorted(groups)
    order = np.random.default_rng([seed, 101]).permutation(len(keys))
    n_val = max(1, round(val_fraction * len(keys)))
    val_keys = {keys[i] for i in order[:n_val]}
    train_ids, val_ids = [], []
    for key in keys:
        (val_ids if key in val_keys else train_ids).extend(groups[key])
    if not train_ids:
        raise ValueError("split left no training frames; dataset too small")
    return train_ids, val_ids


def _gt_arrays(frame: AnnotatedFrame):
    """Normalized boxes, full-raster masks, and (h, w) labels per instance."""
    h, w = frame.height, frame.width
    boxes, masks, dims = [], [], []
    for poly, label in zip(frame.polygons, frame.labels):
        x1, y1, x2, y2 = polygon_bbox(poly)
        box = (max(x1 / w, 0.0), max(y1 / h, 0.0),
               min(x2 / w, 1.0), min(y2 / h, 1.0))
        if box[2] - box[0] <= 1e-6 or box[3] - box[1] <= 1e-6:
            continue
        boxes.append(box)
        masks.append(polygon_to_mask(poly, h, w).astype(np.float64))
        dims.append((label.height_m, label.width_m))
    return boxes, masks, dims


def _depth_factor(depth: np.ndarray, gt_mask: np.ndarray) -> np.ndarray | None:
    """min(d_min/d, 1) with d_min over the instance's own pixels."""
    active = gt_mask > 0.5
    if depth is None or not active.any():
        return None
    d = np.maximum(depth, 1e-9)
    d_min = float(d[active].min())
    return np.minimum(d_min / d, 1.0)


def _frame_loss(model: PmodeNet, frame: AnnotatedFrame,
                depth: np.ndarray | None, corner_params: CornerParams,
                enable_corner: bool, corner_weight: float = 1.0) -> LossReport | None:
    """Composite loss for one frame; None when it has no usable instance."""
    boxes, gt_masks, dims = _gt_arrays(frame)
    if not boxes:
        return None
    out = model(preprocess(frame.image))
    gt_xyxy = np.asarray(boxes, dtype=np.float64)
    labels, matched = match_anchors(model.anchors_xyxy, gt_xyxy)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)

    probs = torch.softmax(out["class_logits"][0], dim=1)
    # hard negative mining at 3:1 against the positives
    n_keep = min(len(neg), 3 * max(len(pos), 1))
    with torch.no_grad():
        neg_scores = probs[neg, 1]
    hard = neg[torch.argsort(neg_scores, descending=True)[:n_keep].numpy()]
    sel = np.concatenate([pos, hard])
    cls_probs = probs[sel]
    cls_targets = np.concatenate([np.ones(len(pos), dtype=np.int64),
                                  np.zeros(len(hard), dtype=np.int64)])

    box_pred = out["boxes"][0, pos]
    box_target = torch.tensor(
        encode_boxes(model.anchors[pos], gt_xyxy[matched[pos]]),
        dtype=torch.float32)

    # one representative anchor per instance drives the mask losses
    protos = out["protos"][0]
    size = model.config.input_size

    def _assembled(anchor_idx: int, box):
        coeffs = out["coeffs"][0, anchor_idx]
        lin = torch.tensordot(coeffs, protos, dims=([0], [0]))
        up = torch.nn.functional.interpolate(
            lin[None, None], size=(size, size), mode="bilinear",
            align_corners=False)[0, 0]
        return crop_mask(torch.sigmoid(up), box), coeffs

    pred_masks, target_masks, mlp_rows, dim_targets = [], [], [], []
    corner_pred, corner_gt = [], []
    for g in range(len(boxes)):
        anchors_g = pos[matched[pos] == g]
        if anchors_g.size == 0:
            continue
        with torch.no_grad():
            best_local = int(torch.argmax(probs[anchors_g, 1]))
        a = int(anchors_g[best_local])
        factor = _depth_factor(depth, gt_masks[g])
        fac_t = None if factor is None else \
            torch.tensor(factor, dtype=torch.float32)
        pred, _ = _assembled(a, boxes[g])
        if fac_t is not None:
            pred = pred * fac_t
        gt_t = torch.tensor(gt_masks[g], dtype=pred.dtype)
        pred_masks.append(pred)
        target_masks.append(gt_t)
        if enable_corner:
            corner_pred.append(pred)
            corner_gt.append(gt_masks[g])
        # every anchor NMS could hand the dimension head at inference time
        # feeds it here: the positives, plus the strongest ignore-band anchor
        # (its classification score is unsupervised and can therefore win;
        # feeding the whole band would drown the positive rows)
        ignored_g = np.flatnonzero((labels == -1) & (matched == g))
        row_anchors = list(anchors_g)
        if ignored_g.size:
            with torch.no_grad():
                row_anchors.append(
                    ignored_g[int(torch.argmax(probs[ignored_g, 1]))])
        with torch.no_grad():
            for a2 in map(int, row_anchors):
                p2, c2 = _assembled(a2, boxes[g])
                if fac_t is not None:
                    p2 = p2 * fac_t
                mlp_rows.append(model.mlp_input(p2, c2))
                dim_targets.append(dims[g])
    if not pred_masks:
        return None

    dim_pred = model.dimension_head(torch.stack(mlp_rows))
    report = total_loss(
        seg_pred=torch.stack(pred_masks),
        seg_target=torch.stack(target_masks),
        box_pred=box_pred,
        box_target=box_target,
        class_probs=cls_probs,
        gt_classes=cls_targets,
        dim_pred=dim_pred,
        dim_target=torch.tensor(dim_targets, dtype=torch.float32),
        pred_masks=corner_pred,
        gt_masks=corner_gt,
        corner_params=corner_params,
        enable_corner=enable_corner)
    if enable_corner and corner_weight != 1.0:
        l_corner = report.l_corner * corner_weight
        report = LossReport(
            l_seg=report.l_seg, l_corner=l_corner, l_hnw=report.l_hnw,
            l_bbox=report.l_bbox, l_cls=report.l_cls,
            l_total=(report.l_seg + l_corner + report.l_hnw
                     + report.l_bbox + report.l_cls))
    return report


def validate(model: PmodeNet, store: FrameStore, image_ids,
             depth_mode: str | None = None) -> dict:
    """Held-out metrics: bbox/segm mAP, dimension MAPE, and L1."""
    model.eval()
    det_boxes, det_masks, gt_boxes, gt_masks = [], [], [], []
    estimates, labels = [], []
    l1_sum, l1_n = 0.0, 0
    for image_id in image_ids:
        frame = store.load(image_id)
        depth = store.load_depth(image_id) if depth_mode else None
        boxes, masks, dims = _gt_arrays(frame)
        dets = infer_frame(model, frame.image, depth=depth, depth_mode=depth_mode)
        det_boxes.append([(c.class_score, c.box) for c, _, _ in dets])
        det_masks.append([(c.class_score, m) for c, m, _ in dets])
        gt_boxes.append(boxes)
        gt_masks.append(masks)
        for g, (h_m, w_m) in enumerate(dims):
            best, best_iou = None, 0.5
            for cand, _, est in dets:
                iou = box_iou_xyxy(cand.box, boxes[g])
                if iou >= best_iou:
                    best, best_iou = est, iou
            if best is None:
                best = DimensionEstimate(width_m=0.0, height_m=0.0)
            estimates.append(best)
            labels.append(DimensionLabel(width_m=w_m, height_m=h_m))
            l1_sum += 0.5 * (abs(best.height_m - h_m) + abs(best.width_m - w_m))
            l1_n += 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bbox_map = evaluate_map(det_boxes, gt_boxes, kind="bbox")
        segm_map = evaluate_map(det_masks, gt_masks, kind="segm")
    mape = evaluate_mape(estimates, labels) if estimates else math.nan
    return {"bbox_map": bbox_map, "segm_map": segm_map, "hnw_mape": mape,
            "val_l1": l1_sum / l1_n if l1_n else math.nan}


def train(config: TrainConfig) -> TrainResult:
    """Run the loop; returns the best-by-MAPE checkpoint and metric history."""
    if config.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)

    store = FrameStore(config.dataset, config.network.input_size,
                       config.depth_mode)
    train_ids, val_ids = split_by_track(store, config.val_fraction, config.seed)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.npz"
    loss_log = out_dir / "loss_log.csv"

    model = PmodeNet(config.network)
    model.train()
    head_params = list(model.dimension_head.parameters())
    head_ids = {id(p) for p in head_params}
    body_params = [p for p in model.parameters() if id(p) not in head_ids]
    opt = torch.optim.SGD(
        [{"params": body_params, "lr": config.learning_rate},
         {"params": head_params,
          "lr": config.learning_rate * config.dim_lr_scale}],
        momentum=config.momentum)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
             if config.lr_schedule == "cosine" else None)
    corner_params = CornerParams().for_resolution(config.network.input_size,
                                                  config.network.input_size)

    aug_rng = np.random.default_rng([config.seed, 17])
    # cache loads; augmentation reuses the originals every epoch
    cache = {i: store.load(i) for i in train_ids}
    depth_cache = {i: store.load_depth(i) for i in train_ids} \
        if config.depth_mode else {}

    history: list[dict] = []
    best_mape = math.inf
    step = 0
    diverged = False
    stop = False

    with loss_log.open("w", encoding="utf-8") as log:
        log.write(LossReport.CSV_HEADER + "\n")
        for epoch in range(config.epochs):
            if stop:
                break
            order = np.random.default_rng(
                [config.seed, 1 + epoch]).permutation(len(train_ids))
            model.train()
            for start in range(0, len(order), config.batch_size):
                batch = [train_ids[j] for j in order[start:start + config.batch_size]]
                reports = []
                for image_id in batch:
                    frame = augment_frame(cache[image_id], config.augment, aug_rng)
                    if frame is None or not frame.polygons:
                        continue
                    rep = _frame_loss(model, frame, depth_cache.get(image_id),
                                      corner_params, config.corner_loss_enabled,
                                      config.corner_weight)
                    if rep is not None:
                        reports.append(rep)
                if not reports:
                    continue
                batch_total = torch.stack([r.l_total for r in reports]).mean()
                if not torch.isfinite(batch_total):
                    diverged = True
                    stop = True
                    break
                opt.zero_grad()
                batch_total.backward()
                opt.step()
                means = {name: float(np.mean([getattr(r, name).detach().numpy()
                                              if torch.is_tensor(getattr(r, name))
                                              else getattr(r, name)
                                              for r in reports]))
                         for name in ("l_seg", "l_corner", "l_hnw",
                                      "l_bbox", "l_cls")}
                mean_report = LossReport(l_total=sum(means.values()), **means)
                log.write(mean_report.csv_row(step) + "\n")
                step += 1
                if config.max_steps is not None and step >= config.max_steps:
                    stop = True
                    break
            if sched is not None:
                sched.step()
            final_epoch = stop or epoch == config.epochs - 1
            if (epoch + 1) % config.eval_interval == 0 or final_epoch:
                metrics = validate(model, store, val_ids, config.depth_mode)
                metrics["epoch"] = epoch
                history.append(metrics)
                mape = metrics["hnw_mape"]
                if not diverged and (math.isnan(best_mape)
                                     or not math.isnan(mape) and mape < best_mape):
                    best_mape = mape
                    save_checkpoint(model, best_path,
                                    metadata={"epoch": epoch,
                                              "val_mape": mape,
                                              "label": config.label})

    if not best_path.exists():
        save_checkpoint(model, best_path, metadata={"epoch": -1,
                                                    "val_mape": math.nan,
                                                    "label": config.label})
    if diverged:
        raise TrainingDiverged(step, best_path)

    curves = {key: tuple(h[key] for h in history)
              for key in ("bbox_map", "segm_map", "hnw_mape", "val_l1")}
    last = history[-1] if history else {"bbox_map": math.nan,
                                        "segm_map": math.nan,
                                        "hnw_mape": math.nan}
    report = MetricReport(bbox_map=last["bbox_map"], segm_map=last["segm_map"],
                          hnw_mape=last["hnw_mape"], curves=curves)
    return TrainResult(best_checkpoint=best_path, report=report,
                       history=history, loss_log=loss_log, diverged=False)


def run_ablation(configs: list[TrainConfig], out_csv=None) -> list[dict]:
    """Train each config and tabulate bbox mAP / segm mAP / MAPE per row."""
    if len(configs) < 2:
        raise ValueError("ablation needs at least 2 configs")
    rows = []
    for i, cfg in enumerate(configs):
        label = cfg.label or f"config_{i}"
        try:
            result = train(cfg)
            rows.append({"label": label,
                         "bbox_map": result.report.bbox_map,
                         "segm_map": result.report.segm_map,
                         "hnw_mape": result.report.hnw_mape,
                         "error": ""})
        except Exception as e:  # keep remaining rows running
            rows.append({"label": label, "bbox_map": math.nan,
                         "segm_map": math.nan, "hnw_mape": math.nan,
                         "error": str(e)})
    if out_csv is not None:
        lines = ["label,bbox_map,segm_map,hnw_mape,error"]
        for r in rows:
            lines.append("%s,%.9g,%.9g,%.9g,%s" % (
                r["label"], r["bbox_map"], r["segm_map"], r["hnw_mape"],
                r["error"].replace(",", ";")))
        Path(out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
