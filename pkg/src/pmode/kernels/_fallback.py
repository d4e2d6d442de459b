"""NumPy implementations of the raster/geometry kernels.

Mirrors `pmode.kernels._core` (the Cython build) op-for-op: both backends
must produce value-identical outputs, which the kernel tests enforce. Keep
arithmetic expression order in sync with the .pyx file when editing.
"""

import numpy as np


def rasterize_polygon(vertices, height, width):
    """Even-odd rasterization of a closed polygon at pixel centers.

    vertices: (N, 2) float64 array of (x, y) points, N >= 3.
    Returns a (height, width) uint8 mask; pixel (r, c) is 1 iff its center
    (c + 0.5, r + 0.5) lies inside the polygon.
    """
    v = np.ascontiguousarray(vertices, dtype=np.float64)
    n = v.shape[0]
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    j = n - 1
    for i in range(n):
        xi, yi = v[i, 0], v[i, 1]
        xj, yj = v[j, 0], v[j, 1]
        crossing = (yi > py) != (yj > py)
        denom = yj - yi
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (py - yi) / denom
        xcross = xi + t * (xj - xi)
        inside ^= crossing[:, None] & (px[None, :] < xcross[:, None])
        j = i
    return inside.astype(np.uint8)


def box_iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two (N, 4) / (M, 4) xyxy box arrays -> (N, M) float64."""
    a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = inter / union
    return np.where(union > 0.0, iou, 0.0)


def plane_depth_map(normal, plane_off, focal, cx, cy, height, width):
    """Depth of the ray-plane intersection at every pixel center.

    The plane is n . P = plane_off in camera coordinates; the ray through
    pixel (c, r) is t * ((c+0.5-cx)/f, (r+0.5-cy)/f, 1), so the returned
    value is the metric Z of the hit point. Pixels whose ray is parallel to
    or leaving the plane (denominator <= 1e-12) get +inf.
    """
    nx, ny, nz = float(normal[0]), float(normal[1]), float(normal[2])
    px = (np.arange(width, dtype=np.float64) + 0.5 - cx) / focal
    py = (np.arange(height, dtype=np.float64) + 0.5 - cy) / focal
    denom = nx * px[None, :] + ny * py[:, None] + nz
    with np.errstate(divide="ignore", invalid="ignore"):
        z = plane_off / denom
    return np.where(denom > 1e-12, z, np.inf)
