"""Benchmark the compiled raster/geometry kernels against the NumPy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats N]

Both backends are imported directly (no PMODE_PURE_PYTHON needed) and their
outputs are checked for exact equality before timing, so a speedup line is
only printed for code that agrees bit-for-bit.
"""

import argparse
import time

import numpy as np

from pmode.kernels import _fallback

try:
    from pmode.kernels import _core
except ImportError:
    _core = None


def _polygon_case(rng, size):
    n = int(rng.integers(3, 9))
    ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    rad = rng.uniform(0.2, 0.45, n) * size
    verts = np.stack([size / 2 + rad * np.cos(ang),
                      size / 2 + rad * np.sin(ang)], axis=1)
    return verts


def _bench(fn, args, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20,
                    help="timing repeats per case; best-of is reported")
    args = ap.parse_args()

    if _core is None:
        print("compiled kernels not built (pip install -e . rebuilds them); "
              "nothing to compare")
        return 1

    rng = np.random.default_rng(7)
    cases = [
        ("rasterize_polygon 128",
         "rasterize_polygon", (_polygon_case(rng, 128), 128, 128)),
        ("rasterize_polygon 550",
         "rasterize_polygon", (_polygon_case(rng, 550), 550, 550)),
        ("box_iou_matrix 1008x16",
         "box_iou_matrix", (rng.uniform(0, 1, (1008, 4)).reshape(-1, 4),
                            rng.uniform(0, 1, (16, 4)))),
        ("box_iou_matrix 5000x64",
         "box_iou_matrix", (rng.uniform(0, 1, (5000, 4)),
                            rng.uniform(0, 1, (64, 4)))),
        ("plane_depth_map 128",
         "plane_depth_map", (np.array([0.1, -0.2, 0.97]), 5.0, 140.0,
                             64.0, 64.0, 128, 128)),
        ("plane_depth_map 550",
         "plane_depth_map", (np.array([0.1, -0.2, 0.97]), 5.0, 600.0,
                             275.0, 275.0, 550, 550)),
    ]

    for name, attr, case_args in cases:
        if attr == "box_iou_matrix":
            a = np.sort(case_args[0].reshape(-1, 2, 2), axis=1).reshape(-1, 4)
            b = np.sort(case_args[1].reshape(-1, 2, 2), axis=1).reshape(-1, 4)
            case_args = (a, b)
        fast = getattr(_core, attr)
        slow = getattr(_fallback, attr)
        if not np.array_equal(fast(*case_args), slow(*case_args)):
            print(f"{name:26s}  MISMATCH between backends — not timing")
            continue
        t_fast = _bench(fast, case_args, args.repeats)
        t_slow = _bench(slow, case_args, args.repeats)
        print(f"{name:26s}  cython {t_fast * 1e3:8.3f} ms   "
              f"numpy {t_slow * 1e3:8.3f} ms   x{t_slow / t_fast:5.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
