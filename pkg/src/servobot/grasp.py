"""Rotation-scan grasp planning and geometric grasp execution.

The planner hovers a fixed clearance above the object's estimated surface,
rotates the camera through a quarter turn while sampling the detected box,
and grasps across the narrowest sampled dimension at the box center. A
quarter turn suffices: the projected height at yaw theta equals the width at
theta + pi/2, so both dimensions together cover every closing direction.

Execution is a geometric predicate on the true scene: the fingers must land
on the object's footprint, within its vertical span, and the true
cross-section along the closing axis must fit the gripper.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from . import world as wd
from .control import (SERVO_TOL_PRE_GRASP_PX, RobotContext, ServoMonitor,
                      servo_to)
from .errors import TaskFailureError

GRIPPER_MAX_WIDTH_M = 0.135
HOVER_ABOVE_M = 0.16
SCAN_RESOLUTION_RAD = math.pi / 36.0
SCAN_SPAN_RAD = math.pi / 2.0
APERTURE_CLEARANCE_M = 0.02
SLIP_DEPTH_ERROR_M = 0.03
SCAN_YAW_RATE_RAD_S = 1.0


class ObjectTooWideError(ValueError):
    """The narrowest graspable dimension still exceeds the gripper."""

    def __init__(self, expected_width_m: float):
        super().__init__(
            f"expected width {expected_width_m:.4f} m exceeds the "
            f"{GRIPPER_MAX_WIDTH_M} m gripper opening")
        self.expected_width_m = expected_width_m


class GraspOutcomeKind(Enum):
    SUCCESS = "success"
    MISS = "miss"
    DROP = "drop"


@dataclass(frozen=True)
class Gripper:
    """Parallel-jaw hand reduced to its holdable width interval."""

    max_width_m: float = GRIPPER_MAX_WIDTH_M
    min_width_m: float = 0.0


@dataclass(frozen=True)
class ScanSample:
    """One detection during the rotation scan.

    yaw is the scan offset from the starting orientation; cam holds the full
    camera pose the sample was taken from, which fixes the world direction
    of the image axes for back-projection.
    """

    yaw: float
    width_px: float
    height_px: float
    center_px: Tuple[float, float]
    cam: wd.CameraPose
    image_id: str


@dataclass
class RotationScan:
    samples: List[ScanSample] = field(default_factory=list)
    resolution: float = SCAN_RESOLUTION_RAD

    def best(self) -> Tuple[ScanSample, str, float]:
        """Sample and dimension of the global minimum pixel extent.

        Ties keep the earliest yaw, and width wins over height at equal
        extent within a sample.
        """
        if not self.samples:
            raise ValueError("empty rotation scan")
        best_sample = None
        best_dim = ""
        best_extent = math.inf
        for sample in self.samples:
            for dim, extent in (("width", sample.width_px),
                                ("height", sample.height_px)):
                if extent < best_extent:
                    best_sample, best_dim, best_extent = sample, dim, extent
        return best_sample, best_dim, best_extent


@dataclass(frozen=True)
class GraspPlan:
    """World-frame grasp: point on the ground plane, wrist yaw, opening."""

    grasp_point: Tuple[float, float]
    grasp_z: float
    depth_m: float
    yaw: float
    closing_axis: float
    aperture_m: float
    expected_width_m: float
    image_id: str


@dataclass
class GraspResult:
    kind: GraspOutcomeKind
    object_id: Optional[str] = None
    extent_m: float = 0.0
    depth_error_m: float = 0.0
    obj: Optional[wd.SceneObject] = None

    @property
    def success(self) -> bool:
        return self.kind is GraspOutcomeKind.SUCCESS


def _observe_once(ctx: RobotContext, class_label: str,
                  monitor: ServoMonitor) -> Tuple[np.ndarray, str]:
    """Capture frames until the tracked class shows up (or the monitor
    raises after its absence limit)."""
    while True:
        rec, detections = ctx.detect_frame(speed=0.0)
        s = monitor.observe(detections, class_label)
        ctx.clock.tick()
        if s is not None:
            return s, rec.image_id


def scan_rotation(ctx: RobotContext, class_label: str,
                  resolution: float = SCAN_RESOLUTION_RAD,
                  span: float = SCAN_SPAN_RAD,
                  monitor: Optional[ServoMonitor] = None) -> RotationScan:
    """Rotate the camera through [0, span) sampling the tracked box."""
    if resolution <= 0.0 or span <= 0.0:
        raise ValueError("resolution and span must be positive")
    n = max(1, int(round(span / resolution)))
    target = np.array(ctx.scene.intrinsics.principal_point, dtype=np.float64)
    mon = monitor or ServoMonitor(s_star=target, task="Grasp")
    scan = RotationScan(resolution=resolution)
    for k in range(n):
        yaw_offset = k * resolution
        if k > 0:
            frames = max(1, int(round(resolution / SCAN_YAW_RATE_RAD_S
                                      / ctx.clock.dt)))
            ctx.cam = ctx.cam.moved(dyaw=resolution)
            ctx.clock.tick(frames)
        s, image_id = _observe_once(ctx, class_label, mon)
        box = mon.last_box
        scan.samples.append(ScanSample(
            yaw=yaw_offset, width_px=box.width, height_px=box.height,
            center_px=(float(s[0]), float(s[1])), cam=ctx.cam,
            image_id=image_id))
    return scan


def select_grasp(scan: RotationScan, depth_m: float,
                 intr: wd.CameraIntrinsics,
                 gripper: Gripper = Gripper()) -> GraspPlan:
    """Turn the narrowest scanned dimension into a world-frame plan."""
    if depth_m <= 0.0:
        raise ValueError("depth must be positive")
    sample, dim, extent_px = scan.best()
    expected_width = extent_px * depth_m / intr.focal_px
    if expected_width > gripper.max_width_m:
        raise ObjectTooWideError(expected_width)
    # World direction of the minimal extent: the image u axis points along
    # the camera yaw, the v axis a quarter turn behind it.
    axis = sample.cam.yaw if dim == "width" else sample.cam.yaw - math.pi / 2
    axis = wd.wrap_angle(axis)
    wx, wy, wz = wd.pixel_to_world(sample.center_px[0], sample.center_px[1],
                                   depth_m, sample.cam, intr)
    return GraspPlan(
        grasp_point=(wx, wy),
        grasp_z=wz,
        depth_m=depth_m,
        yaw=wd.wrap_angle(axis + math.pi / 2.0),
        closing_axis=axis,
        aperture_m=min(gripper.max_width_m,
                       expected_width + APERTURE_CLEARANCE_M),
        expected_width_m=expected_width,
        image_id=sample.image_id)


def _target_object(scene: wd.Scene, x: float, y: float
                   ) -> Optional[wd.SceneObject]:
    """Topmost object whose footprint contains the grasp point."""
    hits = [o for o in scene.objects if o.contains_xy(x, y)]
    if not hits:
        return None
    return max(hits, key=lambda o: (o.top_z, o.obj_id))


def execute_grasp(scene: wd.Scene, plan: GraspPlan,
                  gripper: Gripper = Gripper()) -> GraspResult:
    """Close the fingers at the planned pose and judge the hold.

    Success removes the object from the scene (it hangs in the gripper).
    A depth error beyond the slip threshold but still within the object's
    vertical span closes on the object yet loses it during the lift.
    """
    x, y = plan.grasp_point
    obj = _target_object(scene, x, y)
    if obj is None:
        return GraspResult(kind=GraspOutcomeKind.MISS)
    extent = obj.extent_along(plan.closing_axis)
    depth_error = abs(plan.grasp_z - obj.silhouette_z)
    result = GraspResult(kind=GraspOutcomeKind.MISS, object_id=obj.obj_id,
                         extent_m=extent, depth_error_m=depth_error)
    if depth_error >= obj.height / 2.0:
        return result  # fingers close above the object or inside the floor
    if extent > gripper.max_width_m or extent < gripper.min_width_m:
        return result  # fingers cannot trap the section
    if depth_error > SLIP_DEPTH_ERROR_M or not obj.mass_ok:
        result.kind = GraspOutcomeKind.DROP
        return result
    result.kind = GraspOutcomeKind.SUCCESS
    result.obj = scene.remove(obj.obj_id)
    return result


def run_grasp_task(ctx: RobotContext, class_label: str, lhat: np.ndarray,
                   estimated_depth_m: float,
                   resolution: float = SCAN_RESOLUTION_RAD,
                   gripper: Gripper = Gripper(),
                   hover_m: float = HOVER_ABOVE_M
                   ) -> Tuple[GraspPlan, GraspResult]:
    """Hover, re-center, scan, and execute one grasp attempt.

    The camera first climbs or descends so the estimated object surface sits
    hover_m below it, re-centers the target to the tight servo tolerance,
    then runs the rotation scan. Raises ObjectTooWideError when the scan
    shows nothing the gripper could span; detection loss surfaces as the
    monitor's failure.
    """
    target = np.array(ctx.scene.intrinsics.principal_point, dtype=np.float64)
    monitor = ServoMonitor(s_star=target, task="Grasp")
    dz = estimated_depth_m - hover_m
    if abs(dz) > 1e-12:
        delta = np.zeros(6)
        delta[2] = -dz
        ctx.command_motion(delta, speed=0.05, monitor=monitor,
                           class_label=class_label)
    res = servo_to(ctx, class_label, lhat, tol_px=SERVO_TOL_PRE_GRASP_PX,
                   monitor=monitor, task="Grasp")
    if not res.converged:
        raise TaskFailureError("Grasp", "servo_stalled",
                               list(monitor.recent_image_ids))
    scan = scan_rotation(ctx, class_label, resolution=resolution,
                         monitor=monitor)
    plan = select_grasp(scan, hover_m, ctx.scene.intrinsics, gripper)
    return plan, execute_grasp(ctx.scene, plan, gripper)
