"""Hot geometry kernels with numba acceleration and a pure-numpy fallback.

The numba path compiles on first use (cached on disk afterwards) and is the
default whenever numba imports cleanly. Set ``SERVOBOT_PURE_NUMPY=1`` to force
the numpy implementations; both paths compute the same IEEE double arithmetic
per element and produce bit-identical results.
"""
from __future__ import annotations

import math
import os

import numpy as np

_FORCE_NUMPY = os.environ.get("SERVOBOT_PURE_NUMPY", "").strip() not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError("pure-numpy path forced via SERVOBOT_PURE_NUMPY")
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def deco(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return deco


def _project_points_np(points: np.ndarray, cam_x: float, cam_y: float,
                       cam_z: float, cam_yaw: float, focal: float,
                       cx: float, cy: float) -> np.ndarray:
    """Project world points through a downward pinhole camera.

    The camera x axis is (cos yaw, sin yaw, 0), the y axis
    (sin yaw, -cos yaw, 0) and the optical axis points straight down, so the
    depth of a point is cam_z - point_z. Callers must ensure all depths are
    positive.
    """
    c = math.cos(cam_yaw)
    s = math.sin(cam_yaw)
    rx = points[:, 0] - cam_x
    ry = points[:, 1] - cam_y
    depth = cam_z - points[:, 2]
    u = cx + focal * (rx * c + ry * s) / depth
    v = cy + focal * (rx * s - ry * c) / depth
    return np.stack((u, v), axis=1)


def _project_points_loop(points, cam_x, cam_y, cam_z, cam_yaw, focal, cx, cy):
    c = math.cos(cam_yaw)
    s = math.sin(cam_yaw)
    n = points.shape[0]
    out = np.empty((n, 2), dtype=np.float64)
    for i in range(n):
        rx = points[i, 0] - cam_x
        ry = points[i, 1] - cam_y
        depth = cam_z - points[i, 2]
        out[i, 0] = cx + focal * (rx * c + ry * s) / depth
        out[i, 1] = cy + focal * (rx * s - ry * c) / depth
    return out


def _yaw_sweep_extents_np(points: np.ndarray, cam_x: float, cam_y: float,
                          cam_z: float, yaws: np.ndarray,
                          focal: float) -> np.ndarray:
    """Projected bounding-box (width, height) in pixels for each camera yaw."""
    m = yaws.shape[0]
    out = np.empty((m, 2), dtype=np.float64)
    rx = points[:, 0] - cam_x
    ry = points[:, 1] - cam_y
    depth = cam_z - points[:, 2]
    for j in range(m):
        c = math.cos(yaws[j])
        s = math.sin(yaws[j])
        u = focal * (rx * c + ry * s) / depth
        v = focal * (rx * s - ry * c) / depth
        out[j, 0] = u.max() - u.min()
        out[j, 1] = v.max() - v.min()
    return out


def _yaw_sweep_extents_loop(points, cam_x, cam_y, cam_z, yaws, focal):
    m = yaws.shape[0]
    n = points.shape[0]
    out = np.empty((m, 2), dtype=np.float64)
    for j in range(m):
        c = math.cos(yaws[j])
        s = math.sin(yaws[j])
        u_min = math.inf
        u_max = -math.inf
        v_min = math.inf
        v_max = -math.inf
        for i in range(n):
            rx = points[i, 0] - cam_x
            ry = points[i, 1] - cam_y
            depth = cam_z - points[i, 2]
            u = focal * (rx * c + ry * s) / depth
            v = focal * (rx * s - ry * c) / depth
            if u < u_min:
                u_min = u
            if u > u_max:
                u_max = u
            if v < v_min:
                v_min = v
            if v > v_max:
                v_max = v
        out[j, 0] = u_max - u_min
        out[j, 1] = v_max - v_min
    return out


def _polygon_orient(xs: np.ndarray, ys: np.ndarray) -> float:
    area2 = 0.0
    k = xs.shape[0]
    for i in range(k):
        j = (i + 1) % k
        area2 += xs[i] * ys[j] - xs[j] * ys[i]
    return 1.0 if area2 >= 0.0 else -1.0


def _fill_convex_polygon_np(img: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                            r: int, g: int, b: int) -> None:
    """Paint pixels whose integer-coordinate centers lie inside the polygon."""
    h, w = img.shape[0], img.shape[1]
    x_lo = max(int(math.ceil(xs.min())), 0)
    x_hi = min(int(math.floor(xs.max())), w - 1)
    y_lo = max(int(math.ceil(ys.min())), 0)
    y_hi = min(int(math.floor(ys.max())), h - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return
    orient = _polygon_orient(xs, ys)
    px = np.arange(x_lo, x_hi + 1, dtype=np.float64)[None, :]
    py = np.arange(y_lo, y_hi + 1, dtype=np.float64)[:, None]
    inside = np.ones((y_hi - y_lo + 1, x_hi - x_lo + 1), dtype=np.bool_)
    k = xs.shape[0]
    for i in range(k):
        j = (i + 1) % k
        cross = (xs[j] - xs[i]) * (py - ys[i]) - (ys[j] - ys[i]) * (px - xs[i])
        inside &= cross * orient >= 0.0
    region = img[y_lo:y_hi + 1, x_lo:x_hi + 1]
    region[inside] = np.array([r, g, b], dtype=np.uint8)


def _fill_convex_polygon_loop(img, xs, ys, r, g, b):
    h, w = img.shape[0], img.shape[1]
    x_lo = max(int(math.ceil(xs.min())), 0)
    x_hi = min(int(math.floor(xs.max())), w - 1)
    y_lo = max(int(math.ceil(ys.min())), 0)
    y_hi = min(int(math.floor(ys.max())), h - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return
    orient = _polygon_orient(xs, ys)
    k = xs.shape[0]
    for yy in range(y_lo, y_hi + 1):
        fy = float(yy)
        for xx in range(x_lo, x_hi + 1):
            fx = float(xx)
            inside = True
            for i in range(k):
                j = (i + 1) % k
                cross = (xs[j] - xs[i]) * (fy - ys[i]) - (ys[j] - ys[i]) * (fx - xs[i])
                if cross * orient < 0.0:
                    inside = False
                    break
            if inside:
                img[yy, xx, 0] = r
                img[yy, xx, 1] = g
                img[yy, xx, 2] = b


if _HAVE_NUMBA:
    _project_points_nb = njit(cache=True)(_project_points_loop)
    _yaw_sweep_extents_nb = njit(cache=True)(_yaw_sweep_extents_loop)
    _polygon_orient_nb = njit(cache=True)(_polygon_orient)

    @njit(cache=True)
    def _fill_convex_polygon_nb(img, xs, ys, r, g, b):
        h, w = img.shape[0], img.shape[1]
        x_lo = max(int(math.ceil(xs.min())), 0)
        x_hi = min(int(math.floor(xs.max())), w - 1)
        y_lo = max(int(math.ceil(ys.min())), 0)
        y_hi = min(int(math.floor(ys.max())), h - 1)
        if x_lo > x_hi or y_lo > y_hi:
            return
        orient = _polygon_orient_nb(xs, ys)
        k = xs.shape[0]
        for yy in range(y_lo, y_hi + 1):
            fy = float(yy)
            for xx in range(x_lo, x_hi + 1):
                fx = float(xx)
                inside = True
                for i in range(k):
                    j = (i + 1) % k
                    cross = (xs[j] - xs[i]) * (fy - ys[i]) - (ys[j] - ys[i]) * (fx - xs[i])
                    if cross * orient < 0.0:
                        inside = False
                        break
                if inside:
                    img[yy, xx, 0] = r
                    img[yy, xx, 1] = g
                    img[yy, xx, 2] = b

    ACTIVE_BACKEND = "numba"
    project_points = _project_points_nb
    yaw_sweep_extents = _yaw_sweep_extents_nb
    fill_convex_polygon = _fill_convex_polygon_nb
else:
    ACTIVE_BACKEND = "numpy"
    project_points = _project_points_np
    yaw_sweep_extents = _yaw_sweep_extents_np
    fill_convex_polygon = _fill_convex_polygon_np


def backend_pairs():
    """(name, numpy_impl, active_impl) triples for benchmark comparisons."""
    return [
        ("project_points", _project_points_np, project_points),
        ("yaw_sweep_extents", _yaw_sweep_extents_np, yaw_sweep_extents),
        ("fill_convex_polygon", _fill_convex_polygon_np, fill_convex_polygon),
    ]


def warmup() -> str:
    """Trigger jit compilation so later timing is steady-state."""
    pts = np.array([[0.05, 0.02, 0.1], [-0.04, 0.01, 0.12]], dtype=np.float64)
    project_points(pts, 0.0, 0.0, 0.5, 0.3, 525.0, 320.0, 240.0)
    yaw_sweep_extents(pts, 0.0, 0.0, 0.5, np.array([0.0, 0.4]), 525.0)
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    fill_convex_polygon(img, np.array([1.0, 6.0, 6.0, 1.0]),
                        np.array([1.0, 1.0, 6.0, 6.0]), 10, 20, 30)
    return ACTIVE_BACKEND
