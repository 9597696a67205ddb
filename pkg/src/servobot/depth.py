"""Depth from optical expansion during a straight vertical approach.

While the camera closes on an object, its bounding box grows as f*S/Z. With
travel d_i measured along the approach axis and box size h_i in pixels, the
pinhole model gives h_i * (Z0 - d_i) = c for unknowns (Z0, c), where Z0 is
the depth at the reference pose and c = f*S the size constant. Every
detection during the approach contributes one linear equation, so depth is a
two-parameter least-squares fit that sharpens as travel accumulates.

The approach advances in 0.05 m commanded increments, re-centering laterally
between increments, and records one checkpoint estimate per increment. It
stops once the latest estimate says the object is within 0.2 m; the median
over checkpoint estimates is the depth handed to the grasp stage.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import world as wd
from .control import (RobotContext, SERVO_TOL_PRE_DEPTH_PX, ServoMonitor,
                      servo_to)
from .errors import TaskFailureError

DEPTH_STEP_M = 0.05
DEPTH_STOP_M = 0.2
DEPTH_SPEED_M_S = 0.05
MIN_ALTITUDE_M = 0.03
_SPACING_SLACK_M = 1e-9


class DepthFitError(ValueError):
    """Numerical failure of the depth fit; retried from the servo stage,
    never sent to annotation (the detector did nothing wrong)."""


class RankDeficientError(DepthFitError):
    """All observations share one travel value; (Z0, c) is unidentifiable."""


class NegativeDepthError(DepthFitError):
    """The fit put the object at or behind the camera."""


def box_size_px(width: float, height: float) -> float:
    """Geometric mean of the box sides; stable under in-plane rotation."""
    return math.sqrt(width * height)


@dataclass(frozen=True)
class DepthObservation:
    travel_m: float
    size_px: float
    image_id: str


@dataclass
class DepthObservationLog:
    """Approach-axis travel paired with apparent size, one row per frame."""

    reference_pose: wd.CameraPose
    observations: List[DepthObservation] = field(default_factory=list)

    def append(self, travel_m: float, size_px: float, image_id: str) -> None:
        if size_px <= 0.0:
            raise ValueError("box size must be positive")
        if self.observations and travel_m < self.observations[-1].travel_m:
            raise ValueError("travel must be non-decreasing")
        self.observations.append(DepthObservation(travel_m, size_px,
                                                  image_id))

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def last_travel_m(self) -> float:
        return self.observations[-1].travel_m if self.observations else 0.0

    def travels(self) -> np.ndarray:
        return np.array([o.travel_m for o in self.observations])

    def sizes(self) -> np.ndarray:
        return np.array([o.size_px for o in self.observations])


def fit_reference_depth(travels: Sequence[float], sizes: Sequence[float],
                        weighting: str = "size") -> Tuple[float, float]:
    """Solve h_i*Z0 - c = h_i*d_i for (Z0, c) by least squares.

    Box-size noise n_i enters each row as n_i*(Z0 - d_i), so residual
    variance shrinks as the camera closes in. The default "size" weighting
    scales row i by h_i, which is proportional to 1/(Z0 - d_i) under the
    model and equalizes residual variance; "uniform" solves the rows as
    written. Both solve the same equations and agree exactly on clean data.
    """
    d = np.asarray(travels, dtype=np.float64)
    h = np.asarray(sizes, dtype=np.float64)
    if d.size < 2:
        raise RankDeficientError("need at least two observations")
    if float(d.max() - d.min()) <= 0.0:
        raise RankDeficientError("observations share a single travel value")
    a = np.column_stack((h, -np.ones_like(h)))
    b = h * d
    if weighting == "size":
        a = a * h[:, None]
        b = b * h
    elif weighting != "uniform":
        raise ValueError(f"unknown weighting {weighting!r}")
    sol, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
    z0, c = float(sol[0]), float(sol[1])
    if z0 <= 0.0 or c <= 0.0:
        raise NegativeDepthError(
            f"fit gave reference depth {z0:.4f} m, size constant {c:.2f}")
    return z0, c


def ls_depth(log: DepthObservationLog, weighting: str = "size") -> float:
    """Current remaining depth from the full observation log."""
    z0, _ = fit_reference_depth(log.travels(), log.sizes(), weighting)
    current = z0 - log.last_travel_m
    if current <= 0.0:
        raise NegativeDepthError(
            f"fit put the object {-current:.4f} m behind the camera")
    return current


@dataclass(frozen=True)
class DepthCheckpoint:
    """Per-increment estimate: travel so far and the fitted depths."""

    travel_m: float
    size_px: float
    reference_depth_m: float
    current_depth_m: float


@dataclass
class DepthEstimateSeries:
    checkpoints: List[DepthCheckpoint] = field(default_factory=list)
    final_travel_m: Optional[float] = None
    min_spacing_m: float = DEPTH_STEP_M

    def append(self, ckpt: DepthCheckpoint) -> None:
        if self.checkpoints:
            gap = ckpt.travel_m - self.checkpoints[-1].travel_m
            if gap < self.min_spacing_m - _SPACING_SLACK_M:
                raise ValueError(
                    f"checkpoint spacing {gap:.4f} m below "
                    f"{self.min_spacing_m} m")
        self.checkpoints.append(ckpt)

    def __len__(self) -> int:
        return len(self.checkpoints)

    def estimates_at_final(self) -> List[float]:
        """Each checkpoint's estimate carried to the final pose."""
        if self.final_travel_m is None:
            raise ValueError("series not finalized")
        return [c.reference_depth_m - self.final_travel_m
                for c in self.checkpoints]

    @property
    def final_median(self) -> float:
        return median_aggregate(self.estimates_at_final())

    def csv_rows(self) -> List[str]:
        rows = ["travel_m,size_px,reference_depth_m,current_depth_m"]
        for c in self.checkpoints:
            rows.append(",".join(repr(float(v)) for v in
                                 (c.travel_m, c.size_px,
                                  c.reference_depth_m, c.current_depth_m)))
        return rows


def median_aggregate(values: Sequence[float]) -> float:
    """Exact median; mean of the middle two for even counts."""
    vals = list(values)
    if not vals:
        raise ValueError("median of empty set")
    return float(statistics.median(vals))


@dataclass
class DepthTaskResult:
    series: DepthEstimateSeries
    log: DepthObservationLog
    remaining_m: float
    monitor: ServoMonitor


def _collided(scene: wd.Scene, cam: wd.CameraPose,
              clearance_m: float = 0.005) -> bool:
    """World-side bump check: camera at or inside an object's body."""
    for obj in scene.objects:
        if cam.z <= obj.top_z + clearance_m and obj.contains_xy(cam.x, cam.y):
            return True
    return False


def _dwell_observe(ctx: RobotContext, class_label: str, monitor: ServoMonitor,
                   log: DepthObservationLog, z_ref: float,
                   frames: int) -> Tuple[float, np.ndarray, str]:
    """Hold still and log the requested number of detections.

    Repeated observations at one travel anchor the size constant there,
    which steadies the fit against per-frame box jitter. Returns the last
    size, feature, and image id.
    """
    size = s = image_id = None
    got = 0
    while got < frames:
        rec, detections = ctx.detect_frame(speed=0.0)
        si = monitor.observe(detections, class_label)
        ctx.clock.tick()
        if si is None:
            continue
        box = monitor.last_box
        size = box_size_px(box.width, box.height)
        s, image_id = si, rec.image_id
        log.append(float(z_ref - ctx.cam.z), size, image_id)
        got += 1
    return size, s, image_id


def run_depth_task(ctx: RobotContext, class_label: str, lhat: np.ndarray,
                   step_m: float = DEPTH_STEP_M,
                   stop_m: float = DEPTH_STOP_M,
                   speed_m_s: float = DEPTH_SPEED_M_S,
                   recenter_tol_px: float = SERVO_TOL_PRE_DEPTH_PX,
                   min_altitude_m: float = MIN_ALTITUDE_M,
                   dwell_frames: int = 12,
                   max_checkpoints: int = 60) -> DepthTaskResult:
    """Descend toward the tracked object until it is within stop_m.

    Every frame with a detection feeds the least-squares log; one checkpoint
    is recorded per step_m of measured travel, after a short stationary
    dwell. Loss of detection raises the monitor's failure; a fit that keeps
    the camera descending into the floor or an object raises a Depth task
    failure with reason estimate_diverged.
    """
    target = np.array(ctx.scene.intrinsics.principal_point, dtype=np.float64)
    monitor = ServoMonitor(s_star=target, task="Depth")
    lateral = np.array(lhat, dtype=np.float64).copy()
    lateral[2:, :] = 0.0

    z_ref = ctx.cam.z
    log = DepthObservationLog(reference_pose=ctx.cam)
    _, s, _ = _dwell_observe(ctx, class_label, monitor, log, z_ref,
                             dwell_frames)
    series = DepthEstimateSeries(min_spacing_m=step_m)

    while len(series) < max_checkpoints:
        if np.max(np.abs(s - target)) > recenter_tol_px:
            servo_to(ctx, class_label, lateral, tol_px=recenter_tol_px,
                     s_star=target, monitor=monitor, task="Depth")

        mark = log.last_travel_m if not series.checkpoints else \
            series.checkpoints[-1].travel_m
        mark += step_m
        while z_ref - ctx.cam.z < mark - 1e-12:
            shortfall = mark - (z_ref - ctx.cam.z)
            if ctx.cam.z - shortfall < min_altitude_m:
                raise TaskFailureError("Depth", "estimate_diverged",
                                       list(monitor.recent_image_ids))
            delta = np.array([0.0, 0.0, -shortfall, 0.0, 0.0, 0.0])
            actual = (delta if ctx.actuation is None
                      else ctx.actuation.perturb(delta, ctx.rng))
            dist = abs(float(actual[2]))
            n = max(1, int(math.ceil(dist / speed_m_s / ctx.clock.dt)))
            z_start = ctx.cam.z
            frame_speed = dist / (n * ctx.clock.dt)
            for i in range(1, n + 1):
                ctx.cam = ctx.cam.moved(dz=z_start + actual[2] * i / n
                                        - ctx.cam.z)
                if _collided(ctx.scene, ctx.cam):
                    raise TaskFailureError("Depth", "estimate_diverged",
                                           list(monitor.recent_image_ids))
                rec, detections = ctx.detect_frame(speed=frame_speed)
                si = monitor.observe(detections, class_label)
                ctx.clock.tick()
                if si is None:
                    continue
                s = si
                travel = z_ref - ctx.cam.z
                box = monitor.last_box
                if travel >= log.last_travel_m:
                    log.append(travel, box_size_px(box.width, box.height),
                               rec.image_id)

        size_k, s, _ = _dwell_observe(ctx, class_label, monitor, log, z_ref,
                                      dwell_frames)
        travel = float(z_ref - ctx.cam.z)
        z0, _ = fit_reference_depth(log.travels(), log.sizes())
        current = z0 - travel
        if current <= 0.0:
            raise NegativeDepthError(
                f"fit put the object {-current:.4f} m behind the camera")
        series.append(DepthCheckpoint(travel, size_k, z0, current))
        if current < stop_m:
            series.final_travel_m = travel
            return DepthTaskResult(series=series, log=log,
                                   remaining_m=series.final_median,
                                   monitor=monitor)

    raise TaskFailureError("Depth", "estimate_diverged",
                           list(monitor.recent_image_ids))
