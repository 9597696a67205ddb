"""Benchmark the hot geometry kernels: jitted backend vs plain numpy.

Run with the package installed:

    python3 benchmarks/bench_kernels.py --repeats 200

Set SERVOBOT_PURE_NUMPY=1 before importing to force the fallback backend;
the script then reports the numpy implementation against itself, which is
a quick way to confirm the fallback stays usable.
"""
import argparse
import time

import numpy as np

from servobot import kernels


def best_of(fn, args, repeats):
    """Minimum wall time over repeats, in milliseconds."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def make_workloads(rng):
    points = np.ascontiguousarray(
        rng.uniform(-0.3, 0.3, (4096, 3)) * np.array([1.0, 1.0, 0.4]))
    outline = np.ascontiguousarray(rng.uniform(-0.08, 0.08, (256, 3)))
    outline[:, 2] = np.abs(outline[:, 2])
    yaws = np.arange(0.0, np.pi, np.pi / 360.0)
    img = np.zeros((480, 640, 3), dtype=np.uint8)
    quad_x = np.array([120.0, 520.0, 500.0, 140.0])
    quad_y = np.array([90.0, 110.0, 400.0, 380.0])
    return {
        "project_points": (points, 0.1, -0.2, 0.95, 0.4, 525.0,
                           320.0, 240.0),
        "yaw_sweep_extents": (outline, 0.0, 0.0, 0.46, yaws, 525.0),
        "fill_convex_polygon": (img, quad_x, quad_y, 40, 90, 160),
    }


def main() -> int:
    parser = argparse.ArgumentParser(
        description="Time the geometry kernels on both backends")
    parser.add_argument("--repeats", type=int, default=100,
                        help="timing repeats per kernel (best-of wins)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backend = kernels.warmup()
    print(f"active backend: {backend}")
    workloads = make_workloads(np.random.default_rng(args.seed))

    header = f"{'kernel':<22}{'numpy ms':>12}{'active ms':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, numpy_impl, active_impl in kernels.backend_pairs():
        work = workloads[name]
        numpy_impl(*work)
        active_impl(*work)
        t_np = best_of(numpy_impl, work, args.repeats)
        t_active = best_of(active_impl, work, args.repeats)
        speedup = t_np / t_active if t_active > 0 else float("inf")
        print(f"{name:<22}{t_np:>12.4f}{t_active:>12.4f}{speedup:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
