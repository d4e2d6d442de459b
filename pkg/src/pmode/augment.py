"""Photometric and geometric augmentations with label-consistent transforms.

Photometric ops never touch polygons or metric labels. Geometric ops move
polygons with the exact same map as the pixels; metric (width, height) labels
are invariant except for the two custom ops that change them on purpose:
``rotate90_with_label_swap`` (W and H trade places) and ``extend_mask_length``
(metric length scales with the pixel stretch so pixels-per-meter stays fixed).

Depth integration (`integrate_depth`) modulates a soft mask by normalized
metric depth before it reaches the dimension head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .data import AnnotatedFrame, DimensionLabel


def _check_prob(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass
class AugmentConfig:
    enable_photometric: bool = True
    enable_geometric: bool = True

    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    brightness_contrast_probability: float = 0.5
    hsv_shift: tuple[float, float, float] = (8.0, 20.0, 20.0)
    hsv_probability: float = 0.3
    rgb_shift_max: int = 15
    rgb_shift_probability: float = 0.3
    channel_shuffle_probability: float = 0.1
    median_blur_probability: float = 0.15
    median_blur_ksize: int = 3
    jpeg_probability: float = 0.2
    jpeg_quality_range: tuple[int, int] = (45, 95)

    flip_h_probability: float = 0.5
    flip_v_probability: float = 0.1
    rotation_probability: float = 0.3
    max_rotation_deg: float = 15.0
    rot90_probability: float = 0.0
    mask_extension_probability: float = 0.0
    mask_extension_max_px: int = 20

    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_rotation_deg <= 15.0:
            raise ValueError("max_rotation_deg must be in [0, 15]")
        for name in ("brightness_contrast_probability", "hsv_probability",
                     "rgb_shift_probability", "channel_shuffle_probability",
                     "median_blur_probability", "jpeg_probability",
                     "flip_h_probability", "flip_v_probability",
                     "rotation_probability", "rot90_probability",
                     "mask_extension_probability"):
            _check_prob(name, getattr(self, name))
        if self.median_blur_ksize not in (3, 5):
            raise ValueError("median_blur_ksize must be 3 or 5")
        if self.mask_extension_max_px < 0:
            raise ValueError("mask_extension_max_px must be >= 0")


# ---------------------------------------------------------------------------
# photometric primitives (pure image -> image)

def brightness_contrast(image: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    out = image.astype(np.float64) * alpha + beta
    return np.clip(out, 0, 255).astype(np.uint8)


def hsv_jitter(image: np.ndarray, dh: float, ds: float, dv: float) -> np.ndarray:
    hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV).astype(np.int32)
    hsv[..., 0] = (hsv[..., 0] + int(round(dh))) % 180
    hsv[..., 1] = np.clip(hsv[..., 1] + int(round(ds)), 0, 255)
    hsv[..., 2] = np.clip(hsv[..., 2] + int(round(dv)), 0, 255)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)


def rgb_shift(image: np.ndarray, shifts) -> np.ndarray:
    out = image.astype(np.int32) + np.asarray(shifts, dtype=np.int32)[None, None, :]
    return np.clip(out, 0, 255).astype(np.uint8)


def channel_shuffle(image: np.ndarray, permutation) -> np.ndarray:
    return np.ascontiguousarray(image[..., list(permutation)])


def median_blur(image: np.ndarray, ksize: int) -> np.ndarray:
    return cv2.medianBlur(image, ksize)


def jpeg_cycle(image: np.ndarray, quality: int) -> np.ndarray:
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(image, cv2.COLOR_RGB2BGR),
                           [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise RuntimeError("jpeg encode failed")
    return cv2.cvtColor(cv2.imdecode(buf, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)


def _clone(frame: AnnotatedFrame, image: np.ndarray | None = None,
           polygons=None, labels=None) -> AnnotatedFrame:
    return AnnotatedFrame(
        image=frame.image if image is None else image,
        polygons=[p.copy() for p in frame.polygons] if polygons is None else polygons,
        labels=list(frame.labels) if labels is None else labels,
        occluded_flags=list(frame.occluded_flags),
        track_id=frame.track_id,
        frame_index=frame.frame_index)


def apply_photometric(frame: AnnotatedFrame, cfg: AugmentConfig,
                      rng: np.random.Generator) -> AnnotatedFrame:
    """Pixel-only distortions; polygons and labels pass through untouched."""
    if not cfg.enable_photometric:
        return frame
    img = frame.image
    if rng.uniform() < cfg.brightness_contrast_probability:
        alpha = 1.0 + rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
        beta = 255.0 * rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
        img = brightness_contrast(img, alpha, beta)
    if rng.uniform() < cfg.hsv_probability:
        mh, ms, mv = cfg.hsv_shift
        img = hsv_jitter(img, rng.uniform(-mh, mh), rng.uniform(-ms, ms),
                         rng.uniform(-mv, mv))
    if rng.uniform() < cfg.rgb_shift_probability:
        img = rgb_shift(img, rng.integers(-cfg.rgb_shift_max,
                                          cfg.rgb_shift_max + 1, size=3))
    if rng.uniform() < cfg.channel_shuffle_probability:
        img = channel_shuffle(img, rng.permutation(3))
    if rng.uniform() < cfg.median_blur_probability:
        img = median_blur(img, cfg.median_blur_ksize)
    if rng.uniform() < cfg.jpeg_probability:
        img = jpeg_cycle(img, int(rng.integers(*cfg.jpeg_quality_range)))
    if img is frame.image:
        return frame
    return _clone(frame, image=img)


# ---------------------------------------------------------------------------
# geometric ops

def _finish_geometric(frame: AnnotatedFrame, image: np.ndarray,
                      polygons: list[np.ndarray]) -> AnnotatedFrame | None:
    """Clip vertices into bounds; None (drop signal) if a polygon left the frame."""
    h, w = image.shape[:2]
    clipped = []
    for poly in polygons:
        if (poly[:, 0].max() < 0 or poly[:, 0].min() >= w or
                poly[:, 1].max() < 0 or poly[:, 1].min() >= h):
            return None
        q = poly.copy()
        q[:, 0] = np.clip(q[:, 0], 0.0, np.nextafter(float(w), 0.0))
        q[:, 1] = np.clip(q[:, 1], 0.0, np.nextafter(float(h), 0.0))
        clipped.append(q)
    return _clone(frame, image=image, polygons=clipped)


def flip_frame(frame: AnnotatedFrame, axis: str) -> AnnotatedFrame:
    """Mirror image and polygons; axis 'h' flips left-right, 'v' top-bottom.

    Continuous coordinates flip as x -> W - x (pixel c spans [c, c+1), so the
    raster of the flipped polygon is exactly the flipped raster)."""
    h, w = frame.image.shape[:2]
    polys = []
    for poly in frame.polygons:
        q = poly.copy()
        if axis == "h":
            q[:, 0] = w - q[:, 0]
        elif axis == "v":
            q[:, 1] = h - q[:, 1]
        else:
            raise ValueError("axis must be 'h' or 'v'")
        polys.append(q)
    image = np.ascontiguousarray(
        frame.image[:, ::-1] if axis == "h" else frame.image[::-1])
    out = _finish_geometric(frame, image, polys)
    assert out is not None  # flips cannot push polygons outside
    return out


def rotate_frame(frame: AnnotatedFrame, angle_deg: float) -> AnnotatedFrame | None:
    """Rotate image and polygons about the pixel-index center; None = dropped."""
    h, w = frame.image.shape[:2]
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    mat = cv2.getRotationMatrix2D(center, angle_deg, 1.0)
    image = cv2.warpAffine(frame.image, mat, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_REFLECT_101)
    polys = [poly @ mat[:, :2].T + mat[:, 2] for poly in frame.polygons]
    return _finish_geometric(frame, image, polys)


def apply_geometric(frame: AnnotatedFrame, cfg: AugmentConfig,
                    rng: np.random.Generator) -> AnnotatedFrame | None:
    """Flips and small rotations; metric labels unchanged. None = frame dropped."""
    if not cfg.enable_geometric:
        return frame
    out = frame
    if rng.uniform() < cfg.flip_h_probability:
        out = flip_frame(out, "h")
    if rng.uniform() < cfg.flip_v_probability:
        out = flip_frame(out, "v")
    if rng.uniform() < cfg.rotation_probability:
        angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
        out = rotate_frame(out, angle)
    return out


def rotate90_with_label_swap(frame: AnnotatedFrame) -> AnnotatedFrame:
    """Quarter-turn that trades the board's horizontal and vertical extents.

    Implemented as the main-diagonal transpose (x, y) -> (y, x): width and
    height swap in both pixels and meters, and applying it twice is the exact
    identity on image, polygons and labels.
    """
    image = np.ascontiguousarray(np.transpose(frame.image, (1, 0, 2)))
    polys = [poly[:, ::-1].copy() for poly in frame.polygons]
    labels = [DimensionLabel(width_m=lb.height_m, height_m=lb.width_m)
              for lb in frame.labels]
    return _clone(frame, image=image, polygons=polys, labels=labels)


def extend_mask_length(frame: AnnotatedFrame, px: int,
                       axis: str = "x") -> AnnotatedFrame | None:
    """Stretch each board by `px` pixels along `axis` ('x' widens, 'y' tallens)
    and scale the matching metric label by the same extent ratio, keeping
    pixels-per-meter constant. None = stretch would leave the frame."""
    if px < 0:
        raise ValueError("px must be >= 0")
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    if px == 0:
        return frame
    col = 0 if axis == "x" else 1
    h, w = frame.image.shape[:2]
    bound = w if axis == "x" else h
    image = frame.image.copy()
    polys, labels = [], []
    for poly, label in zip(frame.polygons, frame.labels):
        lo, hi = poly[:, col].min(), poly[:, col].max()
        extent = hi - lo
        if extent <= 0:
            return None
        ratio = (extent + px) / extent
        center = (lo + hi) / 2.0
        q = poly.copy()
        q[:, col] = center + ratio * (q[:, col] - center)
        if q[:, col].min() < 0 or q[:, col].max() >= bound:
            return None
        polys.append(q)
        if axis == "x":
            labels.append(DimensionLabel(width_m=label.width_m * ratio,
                                         height_m=label.height_m))
        else:
            labels.append(DimensionLabel(width_m=label.width_m,
                                         height_m=label.height_m * ratio))
        # stretch the pixels of the board's bounding box by the same ratio
        x0, y0 = np.floor(poly.min(axis=0)).astype(int)
        x1, y1 = np.ceil(poly.max(axis=0)).astype(int) + 1
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w), min(y1, h)
        region = frame.image[y0:y1, x0:x1]
        if region.size == 0:
            continue
        rh, rw = region.shape[:2]
        if axis == "x":
            new_w = max(1, int(round(rw * ratio)))
            resized = cv2.resize(region, (new_w, rh), interpolation=cv2.INTER_LINEAR)
            cx = (x0 + x1) / 2.0
            px0 = int(round(cx - new_w / 2.0))
            sx0, sx1 = max(px0, 0), min(px0 + new_w, w)
            image[y0:y1, sx0:sx1] = resized[:, sx0 - px0:sx1 - px0]
        else:
            new_h = max(1, int(round(rh * ratio)))
            resized = cv2.resize(region, (rw, new_h), interpolation=cv2.INTER_LINEAR)
            cy = (y0 + y1) / 2.0
            py0 = int(round(cy - new_h / 2.0))
            sy0, sy1 = max(py0, 0), min(py0 + new_h, h)
            image[sy0:sy1, x0:x1] = resized[sy0 - py0:sy1 - py0, :]
    return _clone(frame, image=image, polygons=polys, labels=labels)


# ---------------------------------------------------------------------------
# depth integration

def integrate_depth(mask: np.ndarray, depth: np.ndarray,
                    mode: str = "multiply") -> tuple[np.ndarray, bool]:
    """Modulate a soft mask by normalized depth (d_min/d over active pixels).

    Returns (augmented, empty_flag). "multiply" scales each mask value by
    min(d_min/d, 1); with no active pixel (> 0.5) the mask comes back
    unchanged and the flag is set. "concat" stacks (mask, normalized depth)
    channel-first; the depth channel is all-zero when the mask is empty.
    """
    mask = np.asarray(mask, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if mask.shape != depth.shape:
        raise ValueError("mask and depth shapes must match")
    if np.any(depth <= 0):
        raise ValueError("depth values must be positive")
    active = mask > 0.5
    if mode == "multiply":
        if not active.any():
            return mask.copy(), True
        d_min = float(depth[active].min())
        return mask * np.minimum(d_min / depth, 1.0), False
    if mode == "concat":
        if not active.any():
            return np.stack([mask, np.zeros_like(mask)]), True
        d_min = float(depth[active].min())
        return np.stack([mask, np.minimum(d_min / depth, 1.0)]), False
    raise ValueError(f"unknown mode {mode!r}")


def augment_frame(frame: AnnotatedFrame, cfg: AugmentConfig,
                  rng: np.random.Generator) -> AnnotatedFrame | None:
    """Full per-frame pipeline used by training. None = frame dropped."""
    out = apply_photometric(frame, cfg, rng)
    out = apply_geometric(out, cfg, rng)
    if out is None:
        return None
    if cfg.rot90_probability > 0 and rng.uniform() < cfg.rot90_probability:
        out = rotate90_with_label_swap(out)
    if (cfg.mask_extension_probability > 0 and cfg.mask_extension_max_px > 0
            and rng.uniform() < cfg.mask_extension_probability):
        px = int(rng.integers(0, cfg.mask_extension_max_px + 1))
        axis = "x" if rng.uniform() < 0.5 else "y"
        stretched = extend_mask_length(out, px, axis)
        if stretched is not None:
            out = stretched
    return out
