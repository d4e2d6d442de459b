"""Annotation schema, dataset manifest (de)serialization, and geometric
preprocessing shared by every other module.

Vertices are stored as reals so resizing is lossless at the annotation
level; dimension labels are physical meters and never change under raster
operations (the 90-degree label swap in the augment module is the one
exception). Manifest floats are quantized to 9 significant digits at the
serialization boundary, so a saved manifest reloads field-for-field equal.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .kernels import rasterize_polygon


class SchemaError(ValueError):
    """Annotation file does not match the expected JSON structure."""


class ReferentialIntegrityError(SchemaError):
    """An annotation's image_id does not resolve to exactly one frame."""


def quantize9(x: float) -> float:
    """Round to 9 significant digits (the manifest serialization precision)."""
    return float(f"{float(x):.9g}")


@dataclass(frozen=True)
class DimensionLabel:
    """Physical width/height of a board face, in meters."""

    width_m: float
    height_m: float

    def __post_init__(self):
        for name in ("width_m", "height_m"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a finite positive real, got {v!r}")

    def as_hw(self) -> tuple[float, float]:
        return (self.height_m, self.width_m)


def _as_polygon_array(polygon) -> np.ndarray:
    arr = np.asarray(polygon, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"polygon must be an (N, 2) point list, got shape {arr.shape}")
    if arr.shape[0] < 3:
        raise ValueError(f"polygon needs >= 3 vertices, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("polygon vertices must be finite")
    return arr


def _check_polygon_bounds(arr: np.ndarray, height: int, width: int):
    if (arr[:, 0] < 0).any() or (arr[:, 0] >= width).any() or \
       (arr[:, 1] < 0).any() or (arr[:, 1] >= height).any():
        raise ValueError(
            f"polygon vertices must lie within [0,{width})x[0,{height})")


@dataclass
class AnnotatedFrame:
    """One image with its polygon masks and metric labels: the train/eval unit."""

    image: np.ndarray
    polygons: list[np.ndarray]
    labels: list[DimensionLabel]
    occluded_flags: list[bool]
    track_id: int | None = None
    frame_index: int = 0

    def __post_init__(self):
        if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("image must be an HxWx3 uint8 raster")
        if not (len(self.polygons) == len(self.labels) == len(self.occluded_flags)):
            raise ValueError("polygons, labels and occluded_flags must align")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        h, w = self.image.shape[:2]
        self.polygons = [_as_polygon_array(p) for p in self.polygons]
        for p in self.polygons:
            _check_polygon_bounds(p, h, w)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class FrameRecord:
    id: int
    file: str
    width: int
    height: int
    frame_index: int


@dataclass
class AnnotationRecord:
    image_id: int
    polygon: list[list[float]]
    width_m: float
    height_m: float
    occluded: bool
    track_id: int | None

    def polygon_array(self) -> np.ndarray:
        return _as_polygon_array(self.polygon)

    def label(self) -> DimensionLabel:
        return DimensionLabel(width_m=self.width_m, height_m=self.height_m)


@dataclass
class DatasetManifest:
    camera_profile_id: str
    frames: list[FrameRecord] = field(default_factory=list)
    annotations: list[AnnotationRecord] = field(default_factory=list)

    def validate(self) -> "DatasetManifest":
        counts: dict[int, int] = {}
        for fr in self.frames:
            counts[fr.id] = counts.get(fr.id, 0) + 1
        for fr_id, c in counts.items():
            if c > 1:
                raise ReferentialIntegrityError(f"frame id {fr_id} appears {c} times")
        for i, ann in enumerate(self.annotations):
            if counts.get(ann.image_id, 0) != 1:
                raise ReferentialIntegrityError(
                    f"annotation #{i} references image_id {ann.image_id} "
                    f"which resolves to {counts.get(ann.image_id, 0)} frames")
        return self

    def frame_by_id(self, image_id: int) -> FrameRecord:
        for fr in self.frames:
            if fr.id == image_id:
                return fr
        raise KeyError(image_id)

    def annotations_for(self, image_id: int) -> list[AnnotationRecord]:
        return [a for a in self.annotations if a.image_id == image_id]


def _require(cond: bool, msg: str):
    if not cond:
        raise SchemaError(msg)


def load_dataset(path) -> DatasetManifest:
    """Parse and validate an annotation JSON file (schema in save_dataset)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON: {e}") from e
    _require(isinstance(raw, dict), "top level must be an object")
    for key in ("camera_profile_id", "frames", "annotations"):
        _require(key in raw, f"missing top-level key {key!r}")
    _require(isinstance(raw["camera_profile_id"], str), "camera_profile_id must be a string")

    frames = []
    for i, rec in enumerate(raw["frames"]):
        _require(isinstance(rec, dict), f"frames[{i}] must be an object")
        try:
            frames.append(FrameRecord(
                id=int(rec["id"]), file=str(rec["file"]),
                width=int(rec["width"]), height=int(rec["height"]),
                frame_index=int(rec["frame_index"])))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"frames[{i}]: {e!r}") from e

    annotations = []
    for i, rec in enumerate(raw["annotations"]):
        _require(isinstance(rec, dict), f"annotations[{i}] must be an object")
        try:
            poly = [[float(x), float(y)] for x, y in rec["polygon"]]
            tid = rec["track_id"]
            annotations.append(AnnotationRecord(
                image_id=int(rec["image_id"]), polygon=poly,
                width_m=float(rec["width_m"]), height_m=float(rec["height_m"]),
                occluded=bool(rec["occluded"]),
                track_id=None if tid is None else int(tid)))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"annotations[{i}]: {e!r}") from e
        if len(poly) < 3:
            raise SchemaError(f"annotations[{i}]: polygon needs >= 3 vertices")
        if not (annotations[-1].width_m > 0 and annotations[-1].height_m > 0):
            raise SchemaError(f"annotations[{i}]: dimensions must be positive")

    return DatasetManifest(
        camera_profile_id=raw["camera_profile_id"],
        frames=frames, annotations=annotations).validate()


def save_dataset(manifest: DatasetManifest, path) -> None:
    """Write the manifest as UTF-8 JSON with fixed key order.

    Floats carry at most 9 significant digits; reloading the written file
    yields a manifest field-for-field equal to one whose floats were already
    quantized (every manifest this package produces is).
    """
    manifest.validate()
    doc = {
        "camera_profile_id": manifest.camera_profile_id,
        "frames": [
            {"id": fr.id, "file": fr.file, "width": fr.width,
             "height": fr.height, "frame_index": fr.frame_index}
            for fr in manifest.frames
        ],
        "annotations": [
            {"image_id": a.image_id,
             "polygon": [[quantize9(x), quantize9(y)] for x, y in a.polygon],
             "width_m": quantize9(a.width_m), "height_m": quantize9(a.height_m),
             "occluded": a.occluded, "track_id": a.track_id}
            for a in manifest.annotations
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def resize_frame(frame: AnnotatedFrame, target: tuple[int, int]) -> AnnotatedFrame:
    """Resample the image to target (H', W') and rescale polygons to match.

    Dimension labels are physical meters and pass through unchanged.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = frame.image.shape[:2]
    image = cv2.resize(frame.image, (tw, th), interpolation=cv2.INTER_LINEAR)
    sx, sy = tw / w, th / h
    polys = []
    for p in frame.polygons:
        q = p * np.array([sx, sy])
        # guard the half-open bound against upward rounding at the far edge
        q[:, 0] = np.minimum(q[:, 0], np.nextafter(float(tw), 0.0))
        q[:, 1] = np.minimum(q[:, 1], np.nextafter(float(th), 0.0))
        polys.append(q)
    return AnnotatedFrame(
        image=image, polygons=polys, labels=list(frame.labels),
        occluded_flags=list(frame.occluded_flags),
        track_id=frame.track_id, frame_index=frame.frame_index)


def polygon_area(polygon: np.ndarray) -> float:
    """Shoelace area (absolute value) of a closed polygon."""
    p = _as_polygon_array(polygon)
    x, y = p[:, 0], p[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def polygon_bbox(polygon: np.ndarray) -> tuple[float, float, float, float]:
    p = _as_polygon_array(polygon)
    return (float(p[:, 0].min()), float(p[:, 1].min()),
            float(p[:, 0].max()), float(p[:, 1].max()))


def polygon_to_mask(polygon, height: int, width: int) -> np.ndarray:
    """Rasterize a polygon to a binary HxW mask.

    A pixel is set iff its center lies inside the polygon under the even-odd
    rule. A degenerate (zero-area) polygon yields an empty mask and a warning.
    """
    p = _as_polygon_array(polygon)
    _check_polygon_bounds(p, height, width)
    if polygon_area(p) == 0.0:
        warnings.warn("degenerate zero-area polygon rasterizes to an empty mask")
        return np.zeros((height, width), dtype=np.uint8)
    return rasterize_polygon(p, height, width)
