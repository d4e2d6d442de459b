"""Synthetic quadrilateral-signage scenes under a pinhole camera.

Boards are textured planar rectangles with exact metric dimensions; every
frame comes with an analytic polygon mask, a metric depth map and the true
(width, height) label, so the whole training/eval pipeline can be verified
without the original street footage.

Board placement ties depth to physical size (a big board is framed from
farther away, like a camera at road distance from a shopfront), which is
what makes metric size recoverable from a monocular mask at all.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .data import (
    AnnotatedFrame,
    AnnotationRecord,
    DatasetManifest,
    DimensionLabel,
    FrameRecord,
    quantize9,
    save_dataset,
)
from .kernels import plane_depth_map, rasterize_polygon

FAR_PLANE_M = 100.0

IDENTITY_ROT = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


class GeometryError(ValueError):
    """Projection was asked for geometry at or behind the camera plane."""


class LabelingError(ValueError):
    """No fully visible candidate board exists to label."""


@dataclass(frozen=True)
class CameraProfile:
    """Pinhole intrinsics plus a rigid world-to-camera pose (Pc = R @ Pw + t)."""

    profile_id: str
    focal_px: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (H, W)
    rotation: tuple = IDENTITY_ROT
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ValueError("focal_px must be positive")
        h, w = self.image_size
        cx, cy = self.principal_point
        if not (0 <= cx < w and 0 <= cy < h):
            raise ValueError("principal point must lie inside the image")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        return points @ r.T + t


@dataclass(frozen=True)
class BoardSpec:
    """A planar rectangular board: metric size, 3D placement, yaw, texture."""

    width_m: float
    height_m: float
    center_3d: tuple[float, float, float]
    yaw: float = 0.0
    texture_seed: int = 0

    def corners_world(self) -> np.ndarray:
        """3D corners in order TL, TR, BR, BL (image y grows downward)."""
        w2, h2 = self.width_m / 2.0, self.height_m / 2.0
        local = np.array([[-w2, -h2, 0.0], [w2, -h2, 0.0],
                          [w2, h2, 0.0], [-w2, h2, 0.0]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot_y = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return np.asarray(self.center_3d, dtype=np.float64) + local @ rot_y.T

    def normal_world(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([s, 0.0, c])


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one frame deterministically."""

    boards: tuple[BoardSpec, ...]
    distractors: tuple[BoardSpec, ...]
    camera: CameraProfile
    illumination_seed: int = 0
    occluders: tuple[BoardSpec, ...] = ()


def project_points(points: np.ndarray, cam: CameraProfile) -> np.ndarray:
    pc = cam.world_to_camera(np.atleast_2d(points))
    if np.any(pc[:, 2] <= 0):
        raise GeometryError("point at or behind the camera plane")
    cx, cy = cam.principal_point
    u = cam.focal_px * pc[:, 0] / pc[:, 2] + cx
    v = cam.focal_px * pc[:, 1] / pc[:, 2] + cy
    return np.stack([u, v], axis=1)


def project_board(board: BoardSpec, cam: CameraProfile) -> np.ndarray:
    """Project the board's four corners; order preserved (TL, TR, BR, BL)."""
    return project_points(board.corners_world(), cam)


def board_fully_visible(board: BoardSpec, cam: CameraProfile) -> bool:
    corners = cam.world_to_camera(board.corners_world())
    if np.any(corners[:, 2] <= 0):
        return False
    poly = project_board(board, cam)
    h, w = cam.image_size
    return bool(np.all(poly[:, 0] >= 0) and np.all(poly[:, 0] < w) and
                np.all(poly[:, 1] >= 0) and np.all(poly[:, 1] < h))


def _board_plane_camera(board: BoardSpec, cam: CameraProfile) -> tuple[np.ndarray, float]:
    """Plane of the board in camera coordinates as (normal, offset): n.P = off."""
    r = np.asarray(cam.rotation, dtype=np.float64)
    n_cam = r @ board.normal_world()
    c_cam = cam.world_to_camera(np.asarray(board.center_3d)[None, :])[0]
    return n_cam, float(n_cam @ c_cam)


def _shrunk_polygon(board: BoardSpec, cam: CameraProfile, factor: float) -> np.ndarray:
    center = np.asarray(board.center_3d, dtype=np.float64)
    corners = center + factor * (board.corners_world() - center)
    return project_points(corners, cam)


def _paint_board(image, depth, board: BoardSpec, cam: CameraProfile):
    h, w = cam.image_size
    try:
        poly = project_board(board, cam)
    except GeometryError:
        return
    inside = rasterize_polygon(poly, h, w).astype(bool)
    if not inside.any():
        return
    normal, off = _board_plane_camera(board, cam)
    cx, cy = cam.principal_point
    zmap = plane_depth_map(normal, off, cam.focal_px, cx, cy, h, w)
    visible = inside & (zmap > 0) & (zmap < depth)
    if not visible.any():
        return
    depth[visible] = zmap[visible]

    rng = np.random.default_rng(np.random.PCG64(board.texture_seed))
    base = rng.integers(90, 225, size=3)
    border = (base * 0.4).astype(np.int64)
    noise = rng.integers(-10, 11, size=(h, w, 3))
    inner = rasterize_polygon(_shrunk_polygon(board, cam, 0.82), h, w).astype(bool)
    face = np.clip(base[None, :] + noise[visible], 0, 255)
    image[visible] = face.astype(np.uint8)
    rim = visible & ~inner
    image[rim] = np.clip(border[None, :] + noise[rim] // 2, 0, 255).astype(np.uint8)


def _background(cam: CameraProfile, illumination_seed: int) -> np.ndarray:
    h, w = cam.image_size
    rng = np.random.default_rng(np.random.PCG64(illumination_seed))
    base = rng.integers(60, 150, size=3)
    img = np.empty((h, w, 3), dtype=np.int64)
    img[:] = base[None, None, :]
    # muted facade blocks, then grain
    for _ in range(int(rng.integers(3, 7))):
        x0, x1 = np.sort(rng.integers(0, w, size=2))
        y0, y1 = np.sort(rng.integers(0, h, size=2))
        img[y0:y1 + 1, x0:x1 + 1] = rng.integers(40, 170, size=3)[None, None, :]
    img += rng.integers(-12, 13, size=(h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def _validate_scene(scene: SceneSpec):
    if not any(board_fully_visible(b, scene.camera) for b in scene.boards):
        raise LabelingError("scene has no fully visible labelable board")


def render_frame(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render (image, depth_map); pure function of the SceneSpec."""
    _validate_scene(scene)
    cam = scene.camera
    h, w = cam.image_size
    image = _background(cam, scene.illumination_seed)
    depth = np.full((h, w), FAR_PLANE_M, dtype=np.float64)
    for board in (*scene.distractors, *scene.boards, *scene.occluders):
        _paint_board(image, depth, board, cam)
    return image, depth


def choose_labeled_board(scene: SceneSpec, policy: str = "rightmost") -> BoardSpec:
    """The board the annotation rule picks among fully visible candidates."""
    cam = scene.camera
    candidates = [b for b in scene.boards if board_fully_visible(b, cam)]
    if not candidates:
        raise LabelingError("no fully visible board to label")
    if policy == "rightmost":
        return max(candidates, key=lambda b: float(project_board(b, cam)[:, 0].mean()))
    if policy == "nearest":
        return min(candidates, key=lambda b: float(cam.world_to_camera(
            np.asarray(b.center_3d)[None, :])[0, 2]))
    raise ValueError(f"unknown selection policy {policy!r}")


def _occluded_flag(scene: SceneSpec, board: BoardSpec) -> bool:
    cam = scene.camera
    h, w = cam.image_size
    board_mask = rasterize_polygon(project_board(board, cam), h, w).astype(bool)
    board_z = float(cam.world_to_camera(np.asarray(board.center_3d)[None, :])[0, 2])
    for occ in scene.occluders:
        try:
            poly = project_board(occ, cam)
        except GeometryError:
            continue
        occ_z = float(cam.world_to_camera(np.asarray(occ.center_3d)[None, :])[0, 2])
        if occ_z >= board_z:
            continue
        if (rasterize_polygon(poly, h, w).astype(bool) & board_mask).any():
            return True
    return False


def analytic_label(scene: SceneSpec, *, frame_index: int = 0,
                   track_id: int | None = None, policy: str = "rightmost",
                   image: np.ndarray | None = None) -> AnnotatedFrame:
    """Ground-truth annotation for the scene: exactly one labeled polygon."""
    board = choose_labeled_board(scene, policy)
    if image is None:
        image, _ = render_frame(scene)
    return AnnotatedFrame(
        image=image,
        polygons=[project_board(board, scene.camera)],
        labels=[DimensionLabel(width_m=board.width_m, height_m=board.height_m)],
        occluded_flags=[_occluded_flag(scene, board)],
        track_id=track_id,
        frame_index=frame_index)


def default_profiles(image_size: tuple[int, int] = (128, 128),
                     count: int = 3) -> list[CameraProfile]:
    """Cameras with distinct focal lengths (0.8/1.0/1.2 x image width, the
    500-px preset giving 400/500/600)."""
    h, w = image_size
    factors = np.linspace(0.8, 1.2, count) if count > 1 else np.array([1.0])
    return [CameraProfile(profile_id=f"cam{i}", focal_px=float(f * w),
                          principal_point=(w / 2.0, h / 2.0),
                          image_size=(h, w))
            for i, f in enumerate(factors)]


@dataclass
class GenerationConfig:
    """Tunables of the synthetic sampler; defaults give the desk-scale set."""

    occlusion_rate: float = 0.2
    distractor_rate: float = 0.25
    width_range: tuple[float, float] = (1.0, 13.0)
    height_range: tuple[float, float] = (0.5, 3.5)
    aspect_range: tuple[float, float] = (1.2, 6.0)
    yaw_max: float = 0.25
    # projected width as a fraction of image width: frac = a * W^b * (1+eps)
    frame_frac_coeff: float = 0.26
    frame_frac_power: float = 0.38
    frame_frac_jitter: float = 0.07
    track_len: int = 3
    policy: str = "rightmost"
    edge_margin_px: float = 3.0


def _sample_track_board(rng, cfg: GenerationConfig) -> tuple[float, float, int]:
    w0, w1 = cfg.width_range
    h0, h1 = cfg.height_range
    width = float(np.exp(rng.uniform(np.log(w0), np.log(w1))))
    aspect = float(rng.uniform(*cfg.aspect_range))
    height = float(np.clip(width / aspect, h0, h1))
    texture_seed = int(rng.integers(0, 2**31 - 1))
    return quantize9(width), quantize9(height), texture_seed


def _place_board(rng, cfg: GenerationConfig, cam: CameraProfile,
                 width_m: float, height_m: float, texture_seed: int) -> BoardSpec | None:
    h, w = cam.image_size
    f = cam.focal_px
    cx, cy = cam.principal_point
    for _ in range(30):
        frac = cfg.frame_frac_coeff * width_m ** cfg.frame_frac_power
        frac *= 1.0 + rng.uniform(-cfg.frame_frac_jitter, cfg.frame_frac_jitter)
        u_px = frac * w
        z = f * width_m / u_px
        v_px = f * height_m / z
        m = cfg.edge_margin_px
        # yaw shrinks the projection, so the frontoparallel extent bounds it
        lo_x, hi_x = u_px / 2 + m, w - u_px / 2 - m
        lo_y, hi_y = v_px / 2 + m, h - v_px / 2 - m
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        px = rng.uniform(lo_x, hi_x)
        py = rng.uniform(lo_y, hi_y)
        yaw = float(rng.uniform(-cfg.yaw_max, cfg.yaw_max))
        center = ((px - cx) / f * z, (py - cy) / f * z, z)
        board = BoardSpec(width_m=width_m, height_m=height_m,
                          center_3d=tuple(float(c) for c in center),
                          yaw=yaw, texture_seed=texture_seed)
        if board_fully_visible(board, cam):
            return board
    return None


def _sample_distractors(rng, cfg: GenerationConfig, cam: CameraProfile,
                        labeled: BoardSpec) -> list[BoardSpec]:
    if rng.uniform() >= cfg.distractor_rate:
        return []
    f = cam.focal_px
    cx, cy = cam.principal_point
    h, w = cam.image_size
    board_poly = project_board(labeled, cam)
    left_limit = float(board_poly[:, 0].min()) - 4.0
    out = []
    for _ in range(int(rng.integers(1, 3))):
        width_m, height_m, tex = _sample_track_board(rng, cfg)
        z = float(np.asarray(labeled.center_3d)[2]) * rng.uniform(1.6, 3.0)
        u_px = f * width_m / z
        v_px = f * height_m / z
        if u_px + 6 >= left_limit or v_px >= h - 6:
            continue
        px = rng.uniform(u_px / 2 + 2, left_limit - u_px / 2 - 2)
        py = rng.uniform(v_px / 2 + 2, h - v_px / 2 - 2)
        center = ((px - cx) / f * z, (py - cy) / f * z, z)
        out.append(BoardSpec(width_m=width_m, height_m=height_m,
                             center_3d=tuple(float(c) for c in center),
                             yaw=float(rng.uniform(-cfg.yaw_max, cfg.yaw_max)),
                             texture_seed=tex))
    return out


def _sample_occluder(rng, cfg: GenerationConfig, cam: CameraProfile,
                     labeled: BoardSpec) -> list[BoardSpec]:
    if rng.uniform() >= cfg.occlusion_rate:
        return []
    f = cam.focal_px
    cx, cy = cam.principal_point
    poly = project_board(labeled, cam)
    z_board = float(np.asarray(labeled.center_3d)[2])
    z = z_board * rng.uniform(0.4, 0.6)
    x0, x1 = float(poly[:, 0].min()), float(poly[:, 0].max())
    y0, y1 = float(poly[:, 1].min()), float(poly[:, 1].max())
    # vertical pole crossing the board
    px = rng.uniform(x0 + 0.15 * (x1 - x0), x0 + 0.85 * (x1 - x0))
    py = (y0 + y1) / 2.0
    width_m = max(0.06, (x1 - x0) * rng.uniform(0.08, 0.18) * z / f)
    height_m = (y1 - y0) * 1.6 * z / f
    center = ((px - cx) / f * z, (py - cy) / f * z, z)
    return [BoardSpec(width_m=quantize9(width_m), height_m=quantize9(height_m),
                      center_3d=tuple(float(c) for c in center), yaw=0.0,
                      texture_seed=int(rng.integers(0, 2**31 - 1)))]


def build_scene(seed: int, frame_index: int, cam: CameraProfile,
                cfg: GenerationConfig | None = None) -> SceneSpec:
    """Deterministic scene for one frame of the synthetic corpus.

    Board identity (size + texture) is a function of the track index, so the
    track's frames show the same physical board from different views.
    """
    cfg = cfg or GenerationConfig()
    track = frame_index // cfg.track_len
    track_rng = np.random.default_rng(np.random.SeedSequence([seed, 7, track]))
    frame_rng = np.random.default_rng(np.random.SeedSequence([seed, 11, frame_index]))
    width_m, height_m, tex = _sample_track_board(track_rng, cfg)
    board = _place_board(frame_rng, cfg, cam, width_m, height_m, tex)
    if board is None:
        raise LabelingError(f"could not place a fully visible board for frame {frame_index}")
    distractors = _sample_distractors(frame_rng, cfg, cam, board)
    occluders = _sample_occluder(frame_rng, cfg, cam, board)
    return SceneSpec(boards=(board,), distractors=tuple(distractors),
                     camera=cam, occluders=tuple(occluders),
                     illumination_seed=int(frame_rng.integers(0, 2**31 - 1)))


def save_depth_raster(path, depth: np.ndarray) -> None:
    """float32 LE raster with an 8-byte header: H, W as u32 LE."""
    arr = np.asarray(depth, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(arr.tobytes())


def load_depth_raster(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    h, w = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w).astype(np.float32)


def generate_dataset(n: int, seed: int, profiles: list[CameraProfile],
                     out_dir, cfg: GenerationConfig | None = None) -> DatasetManifest:
    """Render n frames round-robin across the camera profiles and write the
    PNGs, depth rasters and manifest JSON under out_dir."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not profiles:
        raise ValueError("at least one camera profile is required")
    cfg = cfg or GenerationConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    frames: list[FrameRecord] = []
    annotations: list[AnnotationRecord] = []
    for i in range(n):
        cam = profiles[i % len(profiles)]
        scene = build_scene(seed, i, cam, cfg)
        image, depth = render_frame(scene)
        track = i // cfg.track_len
        frame = analytic_label(scene, frame_index=i, track_id=track,
                               policy=cfg.policy, image=image)
        name = f"frame_{i:06d}.png"
        cv2.imwrite(str(out_dir / name), cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
        save_depth_raster(out_dir / f"depth_{i:06d}.f32", depth)
        h, w = cam.image_size
        frames.append(FrameRecord(id=i, file=name, width=w, height=h, frame_index=i))
        poly = frame.polygons[0]
        annotations.append(AnnotationRecord(
            image_id=i,
            polygon=[[quantize9(x), quantize9(y)] for x, y in poly],
            width_m=quantize9(frame.labels[0].width_m),
            height_m=quantize9(frame.labels[0].height_m),
            occluded=bool(frame.occluded_flags[0]),
            track_id=track))

    manifest = DatasetManifest(
        camera_profile_id="+".join(p.profile_id for p in profiles),
        frames=frames, annotations=annotations).validate()
    save_dataset(manifest, out_dir / "manifest.json")
    return manifest


def generate_clip(seed: int, n_frames: int, cam: CameraProfile,
                  cfg: GenerationConfig | None = None,
                  drift_px: float = 1.5,
                  track_id: int | None = 0) -> tuple[list, list]:
    """Video-like burst: one fixed scene seen by a laterally drifting camera.

    Unlike generate_dataset (independent placements per frame), consecutive
    clip frames move the camera a little, so the labeled board shifts by
    roughly drift_px pixels per frame — the regime a 30 fps stream produces.
    Returns (frames, depths); frames are AnnotatedFrame, one per rendered
    step. The clip ends early if the drift pushes every candidate board out
    of full visibility.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    scene = build_scene(seed, 0, cam, cfg)
    try:
        labeled = choose_labeled_board(scene, (cfg or GenerationConfig()).policy)
    except LabelingError:
        return [], []
    z_ref = float(labeled.center_3d[2])
    step = drift_px * z_ref / cam.focal_px
    frames, depths = [], []
    for i in range(n_frames):
        cam_i = replace(cam, translation=(step * i, 0.0, 0.0))
        scene_i = replace(scene, camera=cam_i)
        try:
            image, depth = render_frame(scene_i)
            frame = analytic_label(scene_i, frame_index=i, track_id=track_id,
                                   image=image)
        except LabelingError:
            break
        frames.append(frame)
        depths.append(depth)
    return frames, depths
