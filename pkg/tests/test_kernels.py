"""Kernel correctness against independent brute-force oracles, plus
backend (Cython vs NumPy) equivalence."""

import numpy as np
import pytest
from shapely.geometry import box as shapely_box

from pmode import kernels
from pmode.kernels import _fallback

try:
    from pmode.kernels import _core
except ImportError:
    _core = None

BACKENDS = [_fallback] if _core is None else [_fallback, _core]


def point_in_polygon_reference(px, py, poly):
    # textbook crossing-number test, written with the opposite tie convention
    # from the production kernels on purpose
    n = len(poly)
    crossings = 0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 <= py < y2) or (y2 <= py < y1):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < x_at:
                crossings += 1
    return crossings % 2 == 1


@pytest.mark.parametrize("impl", BACKENDS)
def test_rasterize_matches_bruteforce_on_random_polygons(impl, rng):
    for _ in range(100):
        n = int(rng.integers(3, 9))
        poly = rng.uniform(0.0, 64.0, size=(n, 2))
        mask = impl.rasterize_polygon(poly, 64, 64)
        ref = np.zeros((64, 64), dtype=np.uint8)
        for r in range(64):
            for c in range(64):
                ref[r, c] = point_in_polygon_reference(c + 0.5, r + 0.5, poly)
        assert np.array_equal(mask, ref)


@pytest.mark.parametrize("impl", BACKENDS)
def test_rasterize_axis_aligned_rectangle_pixel_count(impl):
    rect = np.array([[10.0, 10.0], [20.0, 10.0], [20.0, 15.0], [10.0, 15.0]])
    mask = impl.rasterize_polygon(rect, 32, 32)
    assert mask.sum() == 50
    assert mask[10:15, 10:20].all()


@pytest.mark.parametrize("impl", BACKENDS)
def test_box_iou_against_shapely(impl, rng):
    a = rng.uniform(0, 1, (30, 4))
    b = rng.uniform(0, 1, (25, 4))
    a[:, 2:] = a[:, :2] + np.abs(a[:, 2:])
    b[:, 2:] = b[:, :2] + np.abs(b[:, 2:])
    got = impl.box_iou_matrix(a, b)
    for i in range(len(a)):
        pa = shapely_box(*a[i])
        for j in range(len(b)):
            pb = shapely_box(*b[j])
            inter = pa.intersection(pb).area
            union = pa.union(pb).area
            want = inter / union if union > 0 else 0.0
            assert got[i, j] == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("impl", BACKENDS)
def test_box_iou_identity_and_disjoint(impl):
    boxes = np.array([[0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]])
    m = impl.box_iou_matrix(boxes, boxes)
    assert m[0, 0] == 1.0 and m[1, 1] == 1.0
    assert m[0, 1] == 0.0 and m[1, 0] == 0.0


@pytest.mark.parametrize("impl", BACKENDS)
def test_plane_depth_satisfies_plane_equation(impl, rng):
    # verify the defining property of each returned depth: the hit point
    # z * ((u-cx)/f, (v-cy)/f, 1) lies on the plane n.P = off
    for _ in range(20):
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        if n[2] < 0:
            n = -n
        off = rng.uniform(2.0, 20.0)
        f, cx, cy = 120.0, 48.0, 48.0
        z = impl.plane_depth_map(n, off, f, cx, cy, 96, 96)
        cols = (np.arange(96) + 0.5 - cx) / f
        rows = (np.arange(96) + 0.5 - cy) / f
        finite = np.isfinite(z)
        px = np.broadcast_to(cols[None, :], z.shape)[finite]
        py = np.broadcast_to(rows[:, None], z.shape)[finite]
        zz = z[finite]
        residual = n[0] * px * zz + n[1] * py * zz + n[2] * zz - off
        assert np.abs(residual).max() < 1e-9


@pytest.mark.parametrize("impl", BACKENDS)
def test_plane_depth_frontoparallel_is_constant(impl):
    z = impl.plane_depth_map(np.array([0.0, 0.0, 1.0]), 10.0, 500.0, 64.0, 64.0, 128, 128)
    assert np.all(z == 10.0)


@pytest.mark.skipif(_core is None, reason="compiled kernels not built")
def test_backends_agree_exactly(rng):
    for _ in range(50):
        n = int(rng.integers(3, 10))
        poly = rng.uniform(0, 64, size=(n, 2))
        assert np.array_equal(_core.rasterize_polygon(poly, 64, 64),
                              _fallback.rasterize_polygon(poly, 64, 64))
    a = rng.uniform(0, 1, (40, 4))
    b = rng.uniform(0, 1, (40, 4))
    a[:, 2:] = a[:, :2] + np.abs(a[:, 2:])
    b[:, 2:] = b[:, :2] + np.abs(b[:, 2:])
    assert np.array_equal(_core.box_iou_matrix(a, b), _fallback.box_iou_matrix(a, b))
    for _ in range(20):
        nrm = rng.standard_normal(3)
        nrm /= np.linalg.norm(nrm)
        args = (nrm, 5.0, 150.0, 32.0, 32.0, 64, 64)
        assert np.array_equal(_core.plane_depth_map(*args),
                              _fallback.plane_depth_map(*args))


def test_backend_reports_choice():
    assert kernels.BACKEND in ("cython", "numpy")
