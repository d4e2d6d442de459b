"""The PMODE network.

Backbone -> feature pyramid -> (protonet, shared prediction head) ->
Fast NMS -> per-instance mask assembly -> MLP dimension head.

The dimension head sees only the assembled prototype mask (resized to
``mlp_mask_size``) concatenated with the instance's mask coefficients, and
both are detached before the head during training, so the hnw regression
never back-propagates into the protonet or the detector.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import integrate_depth
from .kernels import box_iou_matrix

CHECKPOINT_VERSION = "pmode-v1"

# fixed preprocessing constants (must match between training and inference)
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 500
    k_prototypes: int = 32
    backbone_preset: str = "resnet50-like"
    mlp_mask_size: int = 30
    mlp_layers: int = 6
    mlp_hidden: tuple[int, ...] = (512, 256, 128, 64, 16)
    anchor_scale: float = 4.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    nms_iou_threshold: float = 0.5
    score_threshold: float = 0.3
    nms_top_n: int = 10
    pre_nms_top_n: int = 200
    dim_vote_top_n: int = 16  # anchors voting on a detection's dims (1 = winner only)
    fpn_channels: int = 0  # 0 = derive from preset (tiny 64, resnet50-like 256)

    def __post_init__(self):
        if not 1 <= self.k_prototypes <= 100:
            raise ValueError("k_prototypes must be in [1, 100]")
        if self.dim_vote_top_n < 1:
            raise ValueError("dim_vote_top_n must be >= 1")
        if self.backbone_preset not in ("tiny", "resnet50-like"):
            raise ValueError(f"unknown backbone preset {self.backbone_preset!r}")
        if self.mlp_mask_size not in (30, 150):
            raise ValueError("mlp_mask_size must be 30 or 150")
        if self.mlp_layers != len(self.mlp_hidden) + 1:
            raise ValueError("mlp_layers must equal len(mlp_hidden) + 1")
        if self.input_size < 32:
            raise ValueError("input_size too small")

    @property
    def feature_channels(self) -> int:
        if self.fpn_channels:
            return self.fpn_channels
        return 64 if self.backbone_preset == "tiny" else 256

    @staticmethod
    def desk() -> "NetworkConfig":
        """Desk-scale preset: tiny backbone at 128 input."""
        return NetworkConfig(input_size=128, k_prototypes=32,
                             backbone_preset="tiny")


@dataclass(frozen=True)
class DetectionCandidate:
    class_score: float
    box: tuple[float, float, float, float]  # (x1, y1, x2, y2) normalized
    mask_coeffs: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.class_score <= 1.0:
            raise ValueError("class_score must be in [0, 1]")
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ValueError("box must satisfy 0 <= x1 < x2 <= 1, same for y")


@dataclass(frozen=True)
class DimensionEstimate:
    width_m: float
    height_m: float
    detection_ref: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.width_m) and np.isfinite(self.height_m)):
            raise ValueError("dimensions must be finite")


# ---------------------------------------------------------------------------
# backbones

def _conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU())


class TinyBackbone(nn.Module):
    """Four stride-2 stages; C3/C4/C5 at strides 8/16/32."""

    out_channels = (64, 96, 128)

    def __init__(self):
        super().__init__()
        self.stem = _conv_bn(3, 16, 2)
        self.stage1 = nn.Sequential(_conv_bn(16, 32, 2), _conv_bn(32, 32))
        self.stage2 = nn.Sequential(_conv_bn(32, 64, 2), _conv_bn(64, 64))
        self.stage3 = nn.Sequential(_conv_bn(64, 96, 2), _conv_bn(96, 96))
        self.stage4 = nn.Sequential(_conv_bn(96, 128, 2), _conv_bn(128, 128))

    def forward(self, x):
        x = self.stage1(self.stem(x))
        c3 = self.stage2(x)
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        return c3, c4, c5


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1,
                               bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNet50Like(nn.Module):
    """Bottleneck 3-4-6-3 layout; C3/C4/C5 at strides 8/16/32."""

    out_channels = (512, 1024, 2048)

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64), nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1))
        self.layer1 = self._make(64, 64, 3, 1)
        self.layer2 = self._make(256, 128, 4, 2)
        self.layer3 = self._make(512, 256, 6, 2)
        self.layer4 = self._make(1024, 512, 3, 2)

    @staticmethod
    def _make(cin, planes, blocks, stride):
        layers = [Bottleneck(cin, planes, stride)]
        layers += [Bottleneck(planes * 4, planes) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        x = self.layer1(self.stem(x))
        c3 = self.layer2(x)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return c3, c4, c5


class FeaturePyramid(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.lateral = nn.ModuleList(
            nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1)
            for _ in in_channels)

    def forward(self, c3, c4, c5):
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, size=c4.shape[-2:],
                                                 mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, size=c3.shape[-2:],
                                                 mode="nearest")
        return (self.smooth[0](p3), self.smooth[1](p4), self.smooth[2](p5))


class Protonet(nn.Module):
    """k prototype maps at quarter input resolution, ReLU at the output."""

    def __init__(self, channels: int, k: int, proto_size: int):
        super().__init__()
        self.proto_size = proto_size
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU())
        self.post = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, k, 1), nn.ReLU())

    def forward(self, p3):
        x = self.body(p3)
        x = F.interpolate(x, size=(self.proto_size, self.proto_size),
                          mode="bilinear", align_corners=False)
        return self.post(x)


class PredictionHead(nn.Module):
    """Shared across pyramid levels: class, box and coefficient branches."""

    def __init__(self, channels: int, num_anchors: int, k: int):
        super().__init__()
        self.num_anchors = num_anchors
        self.k = k
        self.tower = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU())
        self.cls = nn.Conv2d(channels, num_anchors * 2, 1)
        self.box = nn.Conv2d(channels, num_anchors * 4, 1)
        self.coef = nn.Conv2d(channels, num_anchors * k, 1)
        nn.init.zeros_(self.box.weight)
        nn.init.zeros_(self.box.bias)
        # start heavily background-biased so hard-negative mining is stable
        nn.init.zeros_(self.cls.bias)
        with torch.no_grad():
            bias = self.cls.bias.view(num_anchors, 2)
            bias[:, 0] = 2.0
            bias[:, 1] = -2.0

    def forward(self, feats):
        cls_all, box_all, coef_all = [], [], []
        for f in feats:
            b = f.shape[0]
            t = self.tower(f)
            cls_all.append(self.cls(t).permute(0, 2, 3, 1).reshape(b, -1, 2))
            box_all.append(self.box(t).permute(0, 2, 3, 1).reshape(b, -1, 4))
            coef_all.append(torch.tanh(self.coef(t))
                            .permute(0, 2, 3, 1).reshape(b, -1, self.k))
        return (torch.cat(cls_all, 1), torch.cat(box_all, 1),
                torch.cat(coef_all, 1))


class DimensionHead(nn.Module):
    """Six-layer ReLU MLP: flattened mask + coefficients -> (height, width)."""

    def __init__(self, mask_size: int, k: int, hidden: tuple[int, ...]):
        super().__init__()
        self.mask_size = mask_size
        self.k = k
        widths = [mask_size * mask_size + k, *hidden, 2]
        layers = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)

    def input_length(self) -> int:
        return self.mask_size * self.mask_size + self.k


# ---------------------------------------------------------------------------
# anchors and box coding

VARIANCES = (0.1, 0.2)


def pyramid_strides() -> tuple[int, int, int]:
    return (8, 16, 32)


def feature_sizes(input_size: int) -> list[int]:
    s = input_size
    sizes = []
    for _ in range(5):  # stride-2 convs use ceil division
        s = (s + 1) // 2
        sizes.append(s)
    return sizes[2:]  # /8, /16, /32


def build_anchors(config: NetworkConfig) -> np.ndarray:
    """Normalized (cx, cy, w, h) anchors for all pyramid levels."""
    out = []
    size = float(config.input_size)
    for stride, fs in zip(pyramid_strides(), feature_sizes(config.input_size)):
        base = config.anchor_scale * stride / size
        for i in range(fs):
            for j in range(fs):
                cx = (j + 0.5) / fs
                cy = (i + 0.5) / fs
                for r in config.anchor_ratios:
                    out.append((cx, cy, base * np.sqrt(r), base / np.sqrt(r)))
    return np.asarray(out, dtype=np.float64)


def anchors_to_xyxy(anchors: np.ndarray) -> np.ndarray:
    cx, cy, w, h = anchors.T
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_boxes(anchors: np.ndarray, gt_xyxy: np.ndarray) -> np.ndarray:
    """SSD-style (tx, ty, tw, th) targets with variances (0.1, 0.2)."""
    gx = (gt_xyxy[:, 0] + gt_xyxy[:, 2]) / 2
    gy = (gt_xyxy[:, 1] + gt_xyxy[:, 3]) / 2
    gw = gt_xyxy[:, 2] - gt_xyxy[:, 0]
    gh = gt_xyxy[:, 3] - gt_xyxy[:, 1]
    cx, cy, w, h = anchors.T
    return np.stack([
        (gx - cx) / w / VARIANCES[0],
        (gy - cy) / h / VARIANCES[0],
        np.log(gw / w) / VARIANCES[1],
        np.log(gh / h) / VARIANCES[1]], axis=1)


def decode_boxes(anchors, preds):
    """Inverse of encode_boxes; output xyxy clamped into [0, 1]."""
    is_t = isinstance(preds, torch.Tensor)
    if is_t:
        anchors = torch.as_tensor(anchors, dtype=preds.dtype)
        exp, clamp = torch.exp, lambda x: torch.clamp(x, 0.0, 1.0)
    else:
        exp, clamp = np.exp, lambda x: np.clip(x, 0.0, 1.0)
    cx = anchors[:, 0] + preds[..., 0] * VARIANCES[0] * anchors[:, 2]
    cy = anchors[:, 1] + preds[..., 1] * VARIANCES[0] * anchors[:, 3]
    w = anchors[:, 2] * exp(preds[..., 2] * VARIANCES[1])
    h = anchors[:, 3] * exp(preds[..., 3] * VARIANCES[1])
    stack = torch.stack if is_t else (lambda xs, idx: np.stack(xs, axis=idx))
    out = stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)
    return clamp(out)


def match_anchors(anchors_xyxy: np.ndarray, gt_xyxy: np.ndarray,
                  pos_iou: float = 0.5, neg_iou: float = 0.4):
    """Labels per anchor: 1 positive, 0 negative, -1 ignored; plus the index
    of the matched ground-truth box. Every GT forces its best anchor positive."""
    n = len(anchors_xyxy)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_xyxy) == 0:
        return labels, matched
    iou = box_iou_matrix(anchors_xyxy, gt_xyxy)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    matched = best_gt
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    for g in range(iou.shape[1]):
        a = int(iou[:, g].argmax())
        labels[a] = 1
        matched[a] = g
    return labels, matched


# ---------------------------------------------------------------------------
# mask assembly, cropping, NMS

def assemble_instance_mask(protos, coeffs):
    """sigmoid(sum_i coeffs_i * proto_i); works on numpy or torch inputs."""
    if isinstance(protos, torch.Tensor) or isinstance(coeffs, torch.Tensor):
        protos = torch.as_tensor(protos)
        coeffs = torch.as_tensor(coeffs, dtype=protos.dtype)
        if coeffs.shape[0] != protos.shape[0]:
            raise ValueError("coefficient length must match prototype count")
        return torch.sigmoid(torch.tensordot(coeffs, protos, dims=1))
    protos = np.asarray(protos, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != protos.shape[0]:
        raise ValueError("coefficient length must match prototype count")
    lin = np.tensordot(coeffs, protos, axes=1)
    return 1.0 / (1.0 + np.exp(-lin))


def crop_mask(mask, box_norm):
    """Zero the mask outside the (normalized xyxy) box."""
    is_t = isinstance(mask, torch.Tensor)
    h, w = mask.shape[-2:]
    x1, y1, x2, y2 = box_norm
    c0 = int(np.clip(np.floor(x1 * w), 0, w))
    c1 = int(np.clip(np.ceil(x2 * w), 0, w))
    r0 = int(np.clip(np.floor(y1 * h), 0, h))
    r1 = int(np.clip(np.ceil(y2 * h), 0, h))
    keep = torch.zeros_like(mask) if is_t else np.zeros_like(mask)
    keep[..., r0:r1, c0:c1] = mask[..., r0:r1, c0:c1]
    return keep


def fast_nms_indices(boxes: np.ndarray, scores: np.ndarray,
                     iou_threshold: float, top_n: int) -> np.ndarray:
    """Fast NMS: a box dies if ANY higher-scoring box (dead or alive)
    overlaps it above threshold. Returns kept indices, score-descending."""
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    iou = box_iou_matrix(boxes[order], boxes[order])
    upper = np.triu(iou, k=1)
    keep = upper.max(axis=0, initial=0.0) <= iou_threshold
    return order[keep][:top_n]


def classical_nms_indices(boxes: np.ndarray, scores: np.ndarray,
                          iou_threshold: float) -> np.ndarray:
    """Sequential NMS (suppressed boxes cannot suppress); used as oracle."""
    order = list(np.argsort(-scores, kind="stable"))
    kept = []
    while order:
        i = order.pop(0)
        kept.append(i)
        if not order:
            break
        rest = np.array(order)
        iou = box_iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = [j for j, v in zip(rest, iou) if v <= iou_threshold]
    return np.asarray(kept, dtype=np.int64)


def fast_nms(candidates: list[DetectionCandidate], iou_threshold: float,
             top_n: int) -> list[DetectionCandidate]:
    boxes = np.array([c.box for c in candidates], dtype=np.float64)
    scores = np.array([c.class_score for c in candidates])
    keep = fast_nms_indices(boxes, scores, iou_threshold, top_n)
    return [candidates[i] for i in keep]


# ---------------------------------------------------------------------------
# the network

class PmodeNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        if config.backbone_preset == "tiny":
            self.backbone = TinyBackbone()
        else:
            self.backbone = ResNet50Like()
        ch = config.feature_channels
        self.fpn = FeaturePyramid(self.backbone.out_channels, ch)
        self.protonet = Protonet(ch, config.k_prototypes,
                                 config.input_size // 4)
        self.head = PredictionHead(ch, len(config.anchor_ratios),
                                   config.k_prototypes)
        self.dimension_head = DimensionHead(config.mlp_mask_size,
                                            config.k_prototypes,
                                            config.mlp_hidden)
        self.anchors = build_anchors(config)
        self.anchors_xyxy = anchors_to_xyxy(self.anchors)

    def extract_pyramid_features(self, images: torch.Tensor):
        s = self.config.input_size
        if images.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} input, got "
                             f"{tuple(images.shape[-2:])}")
        return self.fpn(*self.backbone(images))

    def forward(self, images: torch.Tensor) -> dict:
        feats = self.extract_pyramid_features(images)
        protos = self.protonet(feats[0])
        cls, box, coef = self.head(feats)
        return {"protos": protos, "class_logits": cls, "boxes": box,
                "coeffs": coef}

    def mlp_input(self, mask: torch.Tensor, coeffs: torch.Tensor) -> torch.Tensor:
        """Resize a (Hp, Wp) mask to mlp_mask_size^2, flatten, append coeffs."""
        m = self.config.mlp_mask_size
        resized = F.interpolate(mask[None, None], size=(m, m), mode="bilinear",
                                align_corners=False)[0, 0]
        return torch.cat([resized.reshape(-1), coeffs])

    def dimension_head_forward(self, mask, coeffs,
                               detection_ref: int = 0) -> DimensionEstimate:
        """Eval-path estimate; output clamped non-negative for reporting."""
        mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.float32)
        coef_t = torch.as_tensor(np.asarray(coeffs), dtype=torch.float32)
        if coef_t.numel() != self.config.k_prototypes:
            raise ValueError("coefficient length must match k_prototypes")
        with torch.no_grad():
            hw = self.dimension_head(self.mlp_input(mask_t, coef_t)[None])[0]
        height, width = float(hw[0]), float(hw[1])
        return DimensionEstimate(width_m=max(width, 0.0),
                                 height_m=max(height, 0.0),
                                 detection_ref=detection_ref)


def preprocess(image: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 RGB -> normalized float tensor 1x3xHxW."""
    x = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float32) / 255.0
    x = (x - PIXEL_MEAN) / PIXEL_STD
    return x.permute(2, 0, 1)[None]


def infer_frame(model: PmodeNet, image: np.ndarray, depth: np.ndarray | None = None,
                depth_mode: str | None = None
                ) -> list[tuple[DetectionCandidate, np.ndarray, DimensionEstimate]]:
    """Full pipeline on one frame; empty list when nothing clears the score
    threshold. Masks are returned at input resolution, cropped to the box."""
    cfg = model.config
    model.eval()
    with torch.no_grad():
        out = model(preprocess(image))
        scores = torch.softmax(out["class_logits"][0], dim=1)[:, 1].numpy()
        keep = np.nonzero(scores >= cfg.score_threshold)[0]
        if len(keep) == 0:
            return []
        keep = keep[np.argsort(-scores[keep], kind="stable")][:cfg.pre_nms_top_n]
        boxes = decode_boxes(model.anchors[keep],
                             out["boxes"][0, keep].numpy().astype(np.float64))
        coeffs = out["coeffs"][0, keep].numpy()
        nms_keep = fast_nms_indices(boxes, scores[keep],
                                    cfg.nms_iou_threshold, cfg.nms_top_n)
        protos = out["protos"][0]
        kept_scores = scores[keep]
        iou_all = box_iou_matrix(boxes, boxes)
        if depth is not None and (depth_mode or "multiply") != "multiply":
            raise ValueError("only multiply-mode depth is supported here")

        def _masked(j: int, box) -> np.ndarray:
            pm = assemble_instance_mask(protos, torch.as_tensor(coeffs[j]))
            full = F.interpolate(pm[None, None],
                                 size=(cfg.input_size, cfg.input_size),
                                 mode="bilinear", align_corners=False)[0, 0]
            return crop_mask(full, box).numpy().astype(np.float64)

        results = []
        for rank, idx in enumerate(nms_keep):
            box = boxes[idx]
            x1, y1, x2, y2 = (float(v) for v in box)
            if x2 <= x1 or y2 <= y1:
                continue
            cand = DetectionCandidate(
                class_score=float(kept_scores[idx]),
                box=(x1, y1, x2, y2),
                mask_coeffs=coeffs[idx].copy())
            full = _masked(idx, cand.box)
            # Dimension voting: every candidate NMS folded into this
            # detection casts a score-weighted vote, so the estimate stays
            # put when the argmax anchor flips between near-identical frames.
            voters = np.flatnonzero(iou_all[idx] >= cfg.nms_iou_threshold)
            if len(voters) > cfg.dim_vote_top_n:
                order = np.argsort(-kept_scores[voters], kind="stable")
                voters = voters[order[:cfg.dim_vote_top_n]]
            if idx not in voters:
                voters = np.append(voters, idx)
            height = width = total = 0.0
            for j in voters:
                mlp_mask = full if j == idx else _masked(j, cand.box)
                if depth is not None:
                    mlp_mask, _ = integrate_depth(mlp_mask, depth, "multiply")
                e = model.dimension_head_forward(mlp_mask, coeffs[j])
                w = max(float(kept_scores[j]), 1e-12)
                height += w * e.height_m
                width += w * e.width_m
                total += w
            est = DimensionEstimate(width_m=width / total,
                                    height_m=height / total,
                                    detection_ref=rank)
            results.append((cand, full, est))
        return results


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: PmodeNet, path, metadata: dict | None = None) -> None:
    """Single .npz archive: named weight arrays + config echo + version."""
    arrays = {f"param/{k}": v.detach().cpu().numpy()
              for k, v in model.state_dict().items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config__"] = np.array(json.dumps(asdict(model.config)))
    if metadata:
        arrays["__meta__"] = np.array(json.dumps(metadata))
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[PmodeNet, dict]:
    with np.load(path, allow_pickle=False) as z:
        version = str(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        cfg_doc = json.loads(str(z["__config__"]))
        cfg_doc["mlp_hidden"] = tuple(cfg_doc["mlp_hidden"])
        cfg_doc["anchor_ratios"] = tuple(cfg_doc["anchor_ratios"])
        config = NetworkConfig(**cfg_doc)
        model = PmodeNet(config)
        state = {k[len("param/"):]: torch.from_numpy(z[k])
                 for k in z.files if k.startswith("param/")}
        model.load_state_dict(state)
        meta = json.loads(str(z["__meta__"])) if "__meta__" in z.files else {}
    model.eval()
    return model, meta
