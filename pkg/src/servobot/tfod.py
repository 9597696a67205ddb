"""Task-focused few-shot learning loop.

A trial executes the task chain (Find, Servo, Depth, Grasp, and optionally a
placement Find) per object. Vision failures pause the robot, log the failure
images, and wait for one annotation; the resulting example updates the
detector and the chain resumes from Find. An object is retired after its
first complete attempt that needed no update.

Cost accounting is exact and simulated: 7 seconds of annotation per click,
a fixed training bill per detector update that grows with the example set,
and robot time from the trial's frame clock.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detector as det
from . import grasp as gr
from . import world as wd
from .control import SERVO_TOL_PRE_DEPTH_PX, RobotContext, servo_to
from .depth import NegativeDepthError, run_depth_task
from .errors import (DetectionMissingError, ServoDiscontinuityError,
                     TaskFailureError)

ANNOTATION_SECONDS_PER_CLICK = 7.0
CPU_BASE_UPDATE_S = 227.0
CPU_PER_EXAMPLE_S = 39.0
ORACLE_JITTER_PX = 2.0
FIND_POSE_SECONDS = 1.0
EXAMPLE_CAP_PER_TRIAL = 20
NUMERIC_RESTART_CAP = 3


class TaskId(Enum):
    FIND = "Find"
    SERVO = "Servo"
    DEPTH = "Depth"
    GRASP = "Grasp"
    PLACE_FIND = "PlaceFind"


class FailureReason(Enum):
    NO_DETECTION_ALL_POSES = "no_detection_all_poses"
    DISCONTINUITY = "discontinuity"
    MISSING_STREAK = "missing_streak"
    DETECTION_LOST = "detection_lost"


_FIND_TASKS = (TaskId.FIND, TaskId.PLACE_FIND)


class ViolatesOnePerUpdateError(ValueError):
    """More than one positive example supplied for a single update."""


class AnnotationTimeoutError(RuntimeError):
    """The human annotation queue was not served in time."""

    reason = "annotation_starvation"


@dataclass(frozen=True)
class FailureEvent:
    """One paused failure: which task broke, on which images, and why."""

    task: TaskId
    reason: FailureReason
    image_ids: Tuple[str, ...]
    timestamp_s: float
    class_labels: Tuple[str, ...]
    event_id: Optional[str] = None

    def __post_init__(self):
        if not self.image_ids:
            raise ValueError("a failure event needs at least one image")
        if (self.reason is FailureReason.NO_DETECTION_ALL_POSES) != \
                (self.task in _FIND_TASKS):
            raise ValueError(
                f"reason {self.reason.value} inconsistent with task "
                f"{self.task.value}")

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "task": self.task.value,
            "reason": self.reason.value,
            "image_ids": list(self.image_ids),
            "timestamp_s": self.timestamp_s,
            "class_labels": list(self.class_labels),
        }


def event_from_error(err: Exception, class_labels: Sequence[str],
                     timestamp_s: float) -> FailureEvent:
    """Map a task exception onto the failure-event taxonomy."""
    if isinstance(err, ServoDiscontinuityError):
        reason = FailureReason.DISCONTINUITY
    elif isinstance(err, DetectionMissingError):
        reason = (FailureReason.DETECTION_LOST
                  if err.task == TaskId.GRASP.value
                  else FailureReason.MISSING_STREAK)
    elif isinstance(err, TaskFailureError) and err.reason == "not_found":
        reason = FailureReason.NO_DETECTION_ALL_POSES
    else:
        raise TypeError(f"no failure-event mapping for {type(err).__name__}")
    return FailureEvent(task=TaskId(err.task), reason=reason,
                        image_ids=tuple(err.image_ids),
                        timestamp_s=timestamp_s,
                        class_labels=tuple(class_labels))


@dataclass(frozen=True)
class AnnotationBox:
    """One drawn bounding box: a click in the cost model."""

    class_label: str
    center: Tuple[float, float]
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("annotation box must have positive size")

    def to_json(self) -> dict:
        return {"class": self.class_label, "center": list(self.center),
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json(d: dict) -> "AnnotationBox":
        return AnnotationBox(class_label=d["class"],
                             center=(float(d["center"][0]),
                                     float(d["center"][1])),
                             width=float(d["width"]),
                             height=float(d["height"]))


@dataclass(frozen=True)
class FewShotExample:
    """An annotated failure image; empty boxes make it a true negative."""

    image_id: str
    task: TaskId
    boxes: Tuple[AnnotationBox, ...]
    source: str  # "oracle" or "human"
    pos_keys: Tuple[Tuple[str, det.ContextBin], ...] = ()
    neg_keys: Tuple[Tuple[str, det.ContextBin], ...] = ()

    @property
    def clicks(self) -> int:
        return len(self.boxes)

    @property
    def is_positive(self) -> bool:
        return bool(self.boxes)

    def positive_keys(self):
        return list(self.pos_keys)

    def negative_keys(self):
        return list(self.neg_keys)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "task": self.task.value,
            "boxes": [b.to_json() for b in self.boxes],
            "source": self.source,
            "clicks": self.clicks,
            "pos_keys": [f"{label}|{ctx.key()}"
                         for label, ctx in self.pos_keys],
            "neg_keys": [f"{label}|{ctx.key()}"
                         for label, ctx in self.neg_keys],
        }

    @staticmethod
    def from_json(d: dict) -> "FewShotExample":
        def keys(entries):
            return tuple(
                (entry.split("|")[0],
                 det.ContextBin.from_key(entry.split("|")[1]))
                for entry in entries)

        return FewShotExample(
            image_id=d["image_id"], task=TaskId(d["task"]),
            boxes=tuple(AnnotationBox.from_json(b) for b in d["boxes"]),
            source=d["source"], pos_keys=keys(d.get("pos_keys", ())),
            neg_keys=keys(d.get("neg_keys", ())))


@dataclass
class FewShotSet:
    """Append-only example set plus the exact cost ledger."""

    examples: List[FewShotExample] = field(default_factory=list)
    per_task: Dict[str, int] = field(
        default_factory=lambda: {t.value: 0 for t in TaskId})
    updates: int = 0
    cpu_seconds: float = 0.0
    robot_seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def clicks(self) -> int:
        return sum(ex.clicks for ex in self.examples)

    @property
    def annotation_seconds(self) -> float:
        return ANNOTATION_SECONDS_PER_CLICK * self.clicks

    def to_json(self) -> dict:
        return {
            "examples": [ex.to_json() for ex in self.examples],
            "per_task": dict(sorted(self.per_task.items())),
            "updates": self.updates,
            "clicks": self.clicks,
            "annotation_seconds": self.annotation_seconds,
            "cpu_seconds": self.cpu_seconds,
            "robot_seconds": self.robot_seconds,
        }

    @staticmethod
    def from_json(d: dict) -> "FewShotSet":
        few = FewShotSet(
            examples=[FewShotExample.from_json(e) for e in d["examples"]],
            updates=int(d.get("updates", 0)),
            cpu_seconds=float(d.get("cpu_seconds", 0.0)),
            robot_seconds=float(d.get("robot_seconds", 0.0)))
        for task, n in d.get("per_task", {}).items():
            few.per_task[task] = int(n)
        return few


def apply_update(few_shot: FewShotSet, examples: Sequence[FewShotExample],
                 model: det.DetectorModel
                 ) -> Tuple[FewShotSet, det.DetectorModel]:
    """Append one update event's examples and retrain the detector.

    At most one of the examples may be positive; true negatives may ride
    along. Returns the same (mutated) set and a new model.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("an update needs at least one example")
    positives = sum(1 for ex in examples if ex.is_positive)
    if positives > 1:
        raise ViolatesOnePerUpdateError(
            f"{positives} positive examples in one update")
    for ex in examples:
        few_shot.examples.append(ex)
        few_shot.per_task[ex.task.value] += 1
    few_shot.updates += 1
    few_shot.cpu_seconds += (CPU_BASE_UPDATE_S
                             + CPU_PER_EXAMPLE_S * (len(few_shot) - 1))
    new_model = det.update_model(model, examples)
    return few_shot, new_model


class FailureLog:
    """Pending-annotation queue with idempotent event ids."""

    def __init__(self):
        self._events: Dict[str, FailureEvent] = {}
        self._pending: List[str] = []
        self._resolved: Dict[str, List[FewShotExample]] = {}
        self._counter = 0

    def log(self, event: FailureEvent) -> FailureEvent:
        if event.event_id is None:
            event = FailureEvent(task=event.task, reason=event.reason,
                                 image_ids=event.image_ids,
                                 timestamp_s=event.timestamp_s,
                                 class_labels=event.class_labels,
                                 event_id=f"evt-{self._counter:04d}")
            self._counter += 1
        if event.event_id in self._events:
            raise ValueError(f"duplicate failure event {event.event_id}")
        self._events[event.event_id] = event
        self._pending.append(event.event_id)
        return event

    def pending(self) -> List[FailureEvent]:
        return [self._events[eid] for eid in self._pending]

    def get(self, event_id: str) -> FailureEvent:
        return self._events[event_id]

    def resolve(self, event_id: str,
                examples: Sequence[FewShotExample]) -> None:
        if event_id not in self._events:
            raise KeyError(event_id)
        if event_id not in self._pending:
            raise ValueError(f"event {event_id} already resolved")
        self._pending.remove(event_id)
        self._resolved[event_id] = list(examples)

    def resolution(self, event_id: str) -> Optional[List[FewShotExample]]:
        return self._resolved.get(event_id)

    def all_events(self) -> List[FailureEvent]:
        return list(self._events.values())


def _jitter_box(truth: wd.GroundTruthBox, rng: np.random.Generator,
                jitter_px: float,
                image_size: Tuple[int, int]) -> AnnotationBox:
    """Human-like corner placement: each corner lands within jitter_px."""
    half_w, half_h = truth.width / 2.0, truth.height / 2.0
    cx, cy = truth.center
    x_lo = cx - half_w + rng.uniform(-jitter_px, jitter_px)
    x_hi = cx + half_w + rng.uniform(-jitter_px, jitter_px)
    y_lo = cy - half_h + rng.uniform(-jitter_px, jitter_px)
    y_hi = cy + half_h + rng.uniform(-jitter_px, jitter_px)
    w_img, h_img = image_size
    x_lo, x_hi = sorted((max(0.0, x_lo), min(float(w_img), x_hi)))
    y_lo, y_hi = sorted((max(0.0, y_lo), min(float(h_img), y_hi)))
    return AnnotationBox(class_label=truth.class_label,
                         center=((x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0),
                         width=max(x_hi - x_lo, 1.0),
                         height=max(y_hi - y_lo, 1.0))


class OracleAnnotator:
    """Simulated annotator with access to the ground-truth snapshots.

    Labels the first failure image that actually contains a task-relevant
    object; when none does, it submits the last image as a true negative.
    """

    source = "oracle"

    def __init__(self, rng: np.random.Generator,
                 jitter_px: float = ORACLE_JITTER_PX):
        self.rng = rng
        self.jitter_px = jitter_px

    def annotate(self, event: FailureEvent,
                 store: wd.SnapshotStore) -> List[FewShotExample]:
        labels = set(event.class_labels)
        for image_id in event.image_ids:
            rec = store.get(image_id)
            relevant = [e for e in rec.truth
                        if e.box.class_label in labels]
            if not relevant:
                continue
            boxes = tuple(_jitter_box(e.box, self.rng, self.jitter_px,
                                      rec.intrinsics.image_size)
                          for e in relevant)
            pos = tuple((e.box.class_label,
                         det.classify_context(e.box.depth_to_top,
                                              rec.camera_speed,
                                              e.in_clutter))
                        for e in relevant)
            return [FewShotExample(image_id=image_id, task=event.task,
                                   boxes=boxes, source=self.source,
                                   pos_keys=pos)]
        rec = store.get(event.image_ids[-1])
        ctx = det.ambient_context(rec)
        neg = tuple((label, ctx) for label in sorted(labels))
        return [FewShotExample(image_id=rec.image_id, task=event.task,
                               boxes=(), source=self.source, neg_keys=neg)]


@dataclass
class FindOutcome:
    found: bool
    pose_index: int = -1
    class_label: str = ""
    image_ids: List[str] = field(default_factory=list)
    event: Optional[FailureEvent] = None


def run_find(ctx: RobotContext, poses: Sequence[wd.CameraPose],
             class_labels: Sequence[str], sentry: bool = False,
             task: TaskId = TaskId.FIND) -> FindOutcome:
    """Sweep the find poses until a wanted class is detected.

    With sentry set, exhausting the sweep is a quiet non-event; otherwise it
    produces a failure event carrying every sweep image.
    """
    if not poses:
        raise ValueError("find needs at least one pose")
    hop_frames = max(1, int(round(FIND_POSE_SECONDS / ctx.clock.dt)))
    image_ids: List[str] = []
    for i, pose in enumerate(poses):
        ctx.cam = pose
        ctx.clock.tick(hop_frames)
        rec, detections = ctx.detect_frame()
        image_ids.append(rec.image_id)
        hits = [b for b in detections.boxes
                if b.class_label in class_labels]
        if hits:
            best = max(hits, key=lambda b: b.confidence)
            return FindOutcome(found=True, pose_index=i,
                               class_label=best.class_label,
                               image_ids=image_ids)
    if sentry:
        return FindOutcome(found=False, image_ids=image_ids)
    event = FailureEvent(task=task,
                         reason=FailureReason.NO_DETECTION_ALL_POSES,
                         image_ids=tuple(image_ids),
                         timestamp_s=ctx.clock.t,
                         class_labels=tuple(class_labels))
    return FindOutcome(found=False, image_ids=image_ids, event=event)


class MapDepthOracle:
    """Stand-in for a 3D map: true remaining depth plus centimeter noise."""

    def __init__(self, rng: np.random.Generator, sigma_m: float = 0.01):
        self.rng = rng
        self.sigma_m = sigma_m

    def remaining_depth(self, ctx: RobotContext,
                        obj: wd.SceneObject) -> float:
        true_depth = ctx.cam.z - obj.silhouette_z
        return true_depth + self.sigma_m * self.rng.standard_normal()


@dataclass
class ObjectReport:
    """Per-object outcome row for the trial report."""

    object_id: str
    class_label: str
    find_ok: bool = False
    vs_ok: bool = False
    de_ok: bool = False
    grasp_outcome: str = "not_attempted"
    placed: Optional[bool] = None
    attempts: int = 0
    examples_added: int = 0
    numeric_restarts: int = 0
    retired: str = ""
    depth_rows: List[str] = field(default_factory=list)

    @property
    def grasp_ok(self) -> bool:
        return self.grasp_outcome == "success"

    def to_json(self) -> dict:
        d = {
            "object_id": self.object_id,
            "class": self.class_label,
            "find_ok": self.find_ok,
            "vs_ok": self.vs_ok,
            "de_ok": self.de_ok,
            "grasp_outcome": self.grasp_outcome,
            "grasp_ok": self.grasp_ok,
            "attempts": self.attempts,
            "examples_added": self.examples_added,
            "numeric_restarts": self.numeric_restarts,
            "retired": self.retired,
        }
        if self.placed is not None:
            d["placed"] = self.placed
        return d


@dataclass(frozen=True)
class TrialTask:
    """One pick in a trial: the object and, optionally, where it goes."""

    object_id: str
    class_label: str
    place_label: Optional[str] = None


@dataclass
class TrialConfig:
    find_poses: Sequence[wd.CameraPose]
    lhat: np.ndarray
    place_find_poses: Optional[Sequence[wd.CameraPose]] = None
    servo_tol_px: float = SERVO_TOL_PRE_DEPTH_PX
    example_cap: int = EXAMPLE_CAP_PER_TRIAL
    numeric_restart_cap: int = NUMERIC_RESTART_CAP
    sentry: bool = False
    annotate: bool = True
    map_oracle: Optional[MapDepthOracle] = None
    remove_after_attempt: bool = False
    grasp_resolution: float = gr.SCAN_RESOLUTION_RAD
    max_attempts: int = 40


@dataclass
class TrialReport:
    objects: List[ObjectReport] = field(default_factory=list)
    few_shot: FewShotSet = field(default_factory=FewShotSet)
    events: List[FailureEvent] = field(default_factory=list)
    robot_seconds: float = 0.0
    placements: int = 0

    def rate(self, flag: str) -> float:
        """Per-trial success percentage for find/vs/de/grasp flags."""
        if not self.objects:
            return 0.0
        key = {"find": "find_ok", "vs": "vs_ok", "de": "de_ok",
               "grasp": "grasp_ok"}[flag]
        hits = sum(1 for o in self.objects if getattr(o, key))
        return 100.0 * hits / len(self.objects)

    def to_json(self) -> dict:
        return {
            "objects": [o.to_json() for o in self.objects],
            "few_shot": self.few_shot.to_json(),
            "events": [e.to_json() for e in self.events],
            "robot_seconds": self.robot_seconds,
            "placements": self.placements,
            "rates": {k: self.rate(k)
                      for k in ("find", "vs", "de", "grasp")},
        }


class _TrialLoop:
    """Mutable state shared across one trial's objects."""

    def __init__(self, ctx: RobotContext, config: TrialConfig, annotator,
                 few_shot: Optional[FewShotSet] = None,
                 failure_log: Optional[FailureLog] = None):
        self.ctx = ctx
        self.config = config
        self.annotator = annotator
        self.few_shot = few_shot if few_shot is not None else FewShotSet()
        self.log = failure_log if failure_log is not None else FailureLog()
        self.report = TrialReport(few_shot=self.few_shot)

    def try_annotate(self, event: FailureEvent,
                     obj_report: ObjectReport) -> bool:
        """Log, annotate, and apply one update; False when not allowed."""
        if not self.config.annotate:
            return False
        if len(self.few_shot) >= self.config.example_cap:
            return False
        event = self.log.log(event)
        self.report.events.append(event)
        examples = self.annotator.annotate(event, self.ctx.store)
        self.few_shot, self.ctx.model = apply_update(self.few_shot,
                                                     examples,
                                                     self.ctx.model)
        self.log.resolve(event.event_id, examples)
        obj_report.examples_added += len(examples)
        return True

    def run_object(self, task: TrialTask) -> ObjectReport:
        cfg = self.config
        ctx = self.ctx
        rep = ObjectReport(object_id=task.object_id,
                           class_label=task.class_label)
        label = task.class_label
        stage = "find"
        while rep.attempts < cfg.max_attempts:
            if stage == "find":
                rep.attempts += 1
                rep.find_ok = rep.vs_ok = rep.de_ok = False
                rep.grasp_outcome = "not_attempted"
            try:
                if stage == "find":
                    outcome = run_find(ctx, cfg.find_poses, [label],
                                       sentry=cfg.sentry)
                    if not outcome.found:
                        if outcome.event is None:
                            rep.retired = "not_found"
                            break
                        if self.try_annotate(outcome.event, rep):
                            continue
                        rep.retired = "not_found"
                        break
                    rep.find_ok = True

                # Servo stage (also the numeric-restart entry point).
                stage = "find"
                res = servo_to(ctx, label, cfg.lhat,
                               tol_px=cfg.servo_tol_px)
                if not res.converged:
                    rep.retired = "servo_stalled"
                    break
                rep.vs_ok = True

                obj = ctx.scene.get(task.object_id)
                if cfg.map_oracle is not None:
                    estimated = cfg.map_oracle.remaining_depth(ctx, obj)
                    rep.de_ok = True
                else:
                    try:
                        depth_res = run_depth_task(ctx, label, cfg.lhat)
                        estimated = depth_res.remaining_m
                        rep.depth_rows = depth_res.series.csv_rows()
                    except NegativeDepthError:
                        rep.numeric_restarts += 1
                        if rep.numeric_restarts > cfg.numeric_restart_cap:
                            rep.retired = "numeric_failures"
                            break
                        stage = "servo"
                        continue
                    except TaskFailureError as err:
                        if err.reason != "estimate_diverged":
                            raise
                        rep.retired = "estimate_diverged"
                        break

                try:
                    plan, result = gr.run_grasp_task(
                        ctx, label, cfg.lhat, estimated_depth_m=estimated,
                        resolution=cfg.grasp_resolution)
                except gr.ObjectTooWideError:
                    rep.grasp_outcome = "too_wide"
                    rep.retired = "too_wide"
                    break
                rep.grasp_outcome = result.kind.value
                if cfg.map_oracle is None:
                    # Depth success: the fingers closed on whatever object
                    # they met, clear of the surface beneath it.
                    if result.object_id is None:
                        rep.de_ok = False
                    else:
                        hit = (result.obj if result.obj is not None
                               else ctx.scene.get(result.object_id))
                        rep.de_ok = (result.depth_error_m
                                     < hit.height / 2.0)

                if result.success and task.place_label is not None:
                    placed = self._place(task, result.obj, rep)
                    rep.placed = placed
                    if placed:
                        self.report.placements += 1
            except (ServoDiscontinuityError, DetectionMissingError) as err:
                event = event_from_error(err, [label], ctx.clock.t)
                if self.try_annotate(event, rep):
                    stage = "find"
                    continue
                rep.retired = "example_cap"
                break
            except TaskFailureError as err:
                rep.retired = err.reason
                break
            rep.retired = "completed"
            break
        else:
            rep.retired = "attempt_budget"
        if cfg.remove_after_attempt and not rep.grasp_ok:
            try:
                ctx.scene.remove(task.object_id)
            except KeyError:
                pass
        return rep

    def _place(self, task: TrialTask, obj: wd.SceneObject,
               rep: ObjectReport) -> bool:
        """Carry the held object to its bin and release it."""
        ctx = self.ctx
        cfg = self.config
        poses = (cfg.place_find_poses if cfg.place_find_poses is not None
                 else cfg.find_poses)
        while True:
            outcome = run_find(ctx, poses, [task.place_label],
                               sentry=cfg.sentry, task=TaskId.PLACE_FIND)
            if outcome.found:
                break
            if outcome.event is None or not self.try_annotate(outcome.event,
                                                              rep):
                return False
        try:
            res = servo_to(ctx, task.place_label, cfg.lhat,
                           tol_px=cfg.servo_tol_px, task=TaskId.SERVO.value)
        except (ServoDiscontinuityError, DetectionMissingError):
            return False
        if not res.converged:
            return False
        bins = [o for o in ctx.scene.objects
                if o.class_label == task.place_label
                and o.contains_xy(ctx.cam.x, ctx.cam.y)]
        placed = wd.SceneObject(
            obj_id=obj.obj_id, class_label=obj.class_label, shape=obj.shape,
            x=ctx.cam.x, y=ctx.cam.y, yaw=obj.yaw,
            support_z=bins[0].top_z if bins else 0.0,
            graspable=obj.graspable, mass_ok=obj.mass_ok)
        ctx.scene.add(placed)
        return bool(bins)


def run_trial(ctx: RobotContext, tasks: Sequence[TrialTask],
              config: TrialConfig, annotator,
              few_shot: Optional[FewShotSet] = None,
              failure_log: Optional[FailureLog] = None,
              scheduler=None) -> TrialReport:
    """Run the task chain for every object in order.

    scheduler, when given, is called as scheduler(ctx, index) before each
    object; dynamic scenarios use it to move bins between picks.
    """
    loop = _TrialLoop(ctx, config, annotator, few_shot, failure_log)
    for i, task in enumerate(tasks):
        if scheduler is not None:
            scheduler(ctx, i)
        loop.report.objects.append(loop.run_object(task))
    loop.report.robot_seconds = ctx.clock.t
    loop.few_shot.robot_seconds = ctx.clock.t
    return loop.report
