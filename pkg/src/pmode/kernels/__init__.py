"""Raster/geometry kernels with a compiled core and a NumPy fallback.

The Cython extension `pmode.kernels._core` is used when it was built;
otherwise the NumPy implementations take over transparently. Set
PMODE_PURE_PYTHON=1 to force the fallback (useful for benchmarking and
for debugging suspected kernel issues). `BACKEND` reports the choice.
"""

import os

from . import _fallback

if os.environ.get("PMODE_PURE_PYTHON"):
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "numpy"

rasterize_polygon = _impl.rasterize_polygon
box_iou_matrix = _impl.box_iou_matrix
plane_depth_map = _impl.plane_depth_map

__all__ = ["BACKEND", "rasterize_polygon", "box_iou_matrix", "plane_depth_map"]
