"""Image-based servo control on bounding-box center features.

The feature is the tracked box center s = (s_x, s_y); the error e = s - s*
drives the camera through v = -Lhat @ e with per-axis speed clamping. A
monitor guards tracking health: a large inter-frame feature jump stops the
servo immediately, and a sustained run of frames without a detection of the
tracked class is a loss-of-detection failure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import detector as det
from . import world as wd
from .detector import BoundingBox, DetectionSet
from .errors import DetectionMissingError, ServoDiscontinuityError

DISCONTINUITY_L1_PX = 150.0
MISSING_LIMIT_FRAMES = 20
SERVO_TOL_PRE_DEPTH_PX = 10.0
SERVO_TOL_PRE_GRASP_PX = 5.0
DEFAULT_SPEED_LIMIT = np.array([0.1, 0.1, 0.1, 0.0, 0.0, 1.0])


def feedback_error(s: np.ndarray, s_star: np.ndarray) -> np.ndarray:
    """e = s - s*."""
    return np.asarray(s, dtype=np.float64) - np.asarray(s_star,
                                                        dtype=np.float64)


def control(lhat: np.ndarray, e: np.ndarray,
            speed_limit: Optional[np.ndarray] = None) -> np.ndarray:
    """v = -Lhat @ e, clamped per axis."""
    lhat = np.asarray(lhat, dtype=np.float64)
    if lhat.shape != (6, 2):
        raise ValueError("Lhat must be 6x2")
    v = -lhat @ np.asarray(e, dtype=np.float64)
    lim = DEFAULT_SPEED_LIMIT if speed_limit is None else speed_limit
    return np.clip(v, -lim, lim)


def servo_converged(e: np.ndarray, tol_px: float) -> bool:
    """Both error components within tolerance (L-infinity)."""
    return bool(np.all(np.abs(e) <= tol_px))


@dataclass
class ServoMonitor:
    """Tracks feature continuity and detection absence for one object class.

    The first selected feature is the detection nearest the setpoint; the
    discontinuity check applies from the second selection onward.
    """

    s_star: np.ndarray
    task: str = "Servo"
    discontinuity_px: float = DISCONTINUITY_L1_PX
    missing_limit: int = MISSING_LIMIT_FRAMES
    s_prev: Optional[np.ndarray] = None
    missing_streak: int = 0
    recent_image_ids: List[str] = field(default_factory=list)
    last_box: Optional[BoundingBox] = None

    def _reference(self) -> np.ndarray:
        return self.s_star if self.s_prev is None else self.s_prev

    def observe(self, detections: DetectionSet,
                class_label: str) -> Optional[np.ndarray]:
        """Select the tracked feature from one frame of detections.

        Returns the feature, or None when no detection of the class is
        present this frame (the previous feature stays current). Raises on a
        feature jump beyond the discontinuity threshold or when absence
        reaches the missing-frame limit.
        """
        self.recent_image_ids.append(detections.image_id)
        if len(self.recent_image_ids) > self.missing_limit + 1:
            self.recent_image_ids.pop(0)
        candidates = detections.of_class(class_label)
        if not candidates:
            self.missing_streak += 1
            if self.missing_streak >= self.missing_limit:
                raise DetectionMissingError(
                    self.task, [detections.image_id], self.missing_streak)
            return None
        ref = self._reference()
        best = min(candidates,
                   key=lambda b: (abs(b.center[0] - ref[0])
                                  + abs(b.center[1] - ref[1])))
        s = np.array(best.center, dtype=np.float64)
        if self.s_prev is not None:
            jump = float(np.abs(s - self.s_prev).sum())
            if jump > self.discontinuity_px:
                # Keep streak state untouched: the servo stops right here.
                raise ServoDiscontinuityError([detections.image_id], jump)
        self.s_prev = s
        self.missing_streak = 0
        self.last_box = best
        return s


def extract_feature(detections: DetectionSet, class_label: str,
                    monitor: ServoMonitor) -> Optional[np.ndarray]:
    """Functional wrapper over ServoMonitor.observe."""
    return monitor.observe(detections, class_label)


@dataclass
class RobotContext:
    """Everything one simulated trial shares: world state, detector, rng.

    The context owns the camera pose and the clock; task runners move the
    robot exclusively through it so frame accounting and actuation noise stay
    consistent.
    """

    scene: wd.Scene
    model: det.DetectorModel
    rng: np.random.Generator
    cam: wd.CameraPose
    clock: wd.SimClock = field(default_factory=wd.SimClock)
    store: wd.SnapshotStore = field(default_factory=wd.SnapshotStore)
    threshold: float = det.DEFAULT_CONFIDENCE_THRESHOLD
    actuation: Optional[wd.ActuationNoise] = None
    speed_limit: np.ndarray = field(
        default_factory=lambda: DEFAULT_SPEED_LIMIT.copy())

    def capture(self, speed: float = 0.0) -> wd.ImageRecord:
        return self.store.capture(self.scene, self.cam, self.clock,
                                  camera_speed=speed)

    def detect_frame(self, speed: float = 0.0
                     ) -> Tuple[wd.ImageRecord, DetectionSet]:
        rec = self.capture(speed)
        return rec, det.detect(rec, self.model, self.rng, self.threshold)

    def step_velocity(self, velocity: np.ndarray) -> None:
        """Integrate one frame of closed-loop motion."""
        self.cam = wd.apply_velocity(self.cam, velocity, self.clock.dt)
        self.clock.tick()

    def command_motion(self, delta: np.ndarray, speed: float,
                       monitor: Optional[ServoMonitor] = None,
                       class_label: Optional[str] = None) -> np.ndarray:
        """Open-loop motion with per-command actuation noise.

        When a monitor is supplied, every frame of the motion is captured and
        observed so sustained detection loss surfaces mid-move. Returns the
        measured pose change.
        """
        before = self.cam
        actual = (delta.copy() if self.actuation is None
                  else self.actuation.perturb(delta.copy(), self.rng))
        distance = float(np.linalg.norm(actual[:3]))
        n = max(1, int(math.ceil(distance / max(speed, 1e-9) / self.clock.dt)))
        target = wd.CameraPose(
            before.x + actual[0], before.y + actual[1], before.z + actual[2],
            before.roll, before.pitch, wd.wrap_angle(before.yaw + actual[5]))
        frame_speed = distance / (n * self.clock.dt)
        for i in range(1, n + 1):
            f = i / n
            self.cam = wd.CameraPose(
                before.x + f * actual[0], before.y + f * actual[1],
                before.z + f * actual[2], before.roll, before.pitch,
                wd.wrap_angle(before.yaw + f * actual[5]))
            if monitor is not None and class_label is not None:
                _, detections = self.detect_frame(speed=frame_speed)
                monitor.observe(detections, class_label)
            self.clock.tick()
        self.cam = target
        return wd.pose_delta(before, self.cam)

    def settle(self, seconds: float = 0.2) -> None:
        self.clock.tick(max(1, int(round(seconds / self.clock.dt))))


@dataclass
class ServoResult:
    converged: bool
    frames: int
    final_error: np.ndarray
    monitor: ServoMonitor


def servo_to(ctx: RobotContext, class_label: str, lhat: np.ndarray,
             tol_px: float, s_star: Optional[np.ndarray] = None,
             monitor: Optional[ServoMonitor] = None,
             task: str = "Servo", max_frames: int = 2000) -> ServoResult:
    """Closed-loop servo until the feature error is within tolerance.

    Raises the monitor's failure when tracking breaks; returns a
    non-converged result only when the frame budget runs out.
    """
    target = np.array(s_star if s_star is not None
                      else ctx.scene.intrinsics.principal_point,
                      dtype=np.float64)
    mon = monitor or ServoMonitor(s_star=target, task=task)
    e = None
    speed = 0.0
    for frame in range(max_frames):
        _, detections = ctx.detect_frame(speed=speed)
        s = mon.observe(detections, class_label)
        if s is None:
            # Hold position while the detection is absent.
            ctx.step_velocity(np.zeros(6))
            speed = 0.0
            continue
        e = feedback_error(s, target)
        if servo_converged(e, tol_px):
            return ServoResult(True, frame + 1, e, mon)
        v = control(lhat, e, ctx.speed_limit)
        speed = float(np.linalg.norm(v[:3]))
        ctx.step_velocity(v)
    return ServoResult(False, max_frames,
                       e if e is not None else np.full(2, np.nan), mon)
