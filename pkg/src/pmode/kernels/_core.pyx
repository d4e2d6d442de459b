# Compiled raster/geometry kernels. Must stay value-identical to
# pmode.kernels._fallback: keep expression order in sync when editing.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def rasterize_polygon(vertices, Py_ssize_t height, Py_ssize_t width):
    """Even-odd rasterization of a closed polygon at pixel centers."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v = np.ascontiguousarray(
        vertices, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros(
        (height, width), dtype=np.uint8)
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t r, c, i, j
    cdef double px, py, xi, yi, xj, yj, t, xcross
    cdef int inside
    for r in range(height):
        py = r + 0.5
        for c in range(width):
            px = c + 0.5
            inside = 0
            j = n - 1
            for i in range(n):
                xi = v[i, 0]
                yi = v[i, 1]
                xj = v[j, 0]
                yj = v[j, 1]
                if (yi > py) != (yj > py):
                    t = (py - yi) / (yj - yi)
                    xcross = xi + t * (xj - xi)
                    if px < xcross:
                        inside = not inside
                j = i
            out[r, c] = inside
    return out


def box_iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two (N, 4) / (M, 4) xyxy box arrays -> (N, M) float64."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(
        boxes_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = np.ascontiguousarray(
        boxes_b, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, k
    cdef double area_a, area_b, ix1, iy1, ix2, iy2, iw, ih, inter, union
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for k in range(m):
            area_b = (b[k, 2] - b[k, 0]) * (b[k, 3] - b[k, 1])
            ix1 = a[i, 0] if a[i, 0] > b[k, 0] else b[k, 0]
            iy1 = a[i, 1] if a[i, 1] > b[k, 1] else b[k, 1]
            ix2 = a[i, 2] if a[i, 2] < b[k, 2] else b[k, 2]
            iy2 = a[i, 3] if a[i, 3] < b[k, 3] else b[k, 3]
            iw = ix2 - ix1
            if iw < 0.0:
                iw = 0.0
            ih = iy2 - iy1
            if ih < 0.0:
                ih = 0.0
            inter = iw * ih
            union = area_a + area_b - inter
            if union > 0.0:
                out[i, k] = inter / union
            else:
                out[i, k] = 0.0
    return out


def plane_depth_map(normal, double plane_off, double focal, double cx,
                    double cy, Py_ssize_t height, Py_ssize_t width):
    """Depth of the ray-plane intersection at every pixel center."""
    cdef double nx = normal[0]
    cdef double ny = normal[1]
    cdef double nz = normal[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty(
        (height, width), dtype=np.float64)
    cdef Py_ssize_t r, c
    cdef double px, py, denom
    cdef double inf = float("inf")
    for r in range(height):
        py = (r + 0.5 - cy) / focal
        for c in range(width):
            px = (c + 0.5 - cx) / focal
            denom = nx * px + ny * py + nz
            if denom > 1e-12:
                out[r, c] = plane_off / denom
            else:
                out[r, c] = inf
    return out
