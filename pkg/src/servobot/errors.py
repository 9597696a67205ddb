"""Exception types shared across task modules."""
from __future__ import annotations

from typing import Sequence


class TaskFailureError(Exception):
    """A task-level failure that the annotation loop can recover from.

    Carries the task name, a machine-readable reason, and the ids of the
    images that should be offered to the annotator.
    """

    def __init__(self, task: str, reason: str, image_ids: Sequence[str]):
        super().__init__(f"{task} failed: {reason}")
        self.task = task
        self.reason = reason
        self.image_ids = list(image_ids)


class ServoDiscontinuityError(TaskFailureError):
    def __init__(self, image_ids: Sequence[str], jump_px: float):
        super().__init__("Servo", "feature_discontinuity", image_ids)
        self.jump_px = jump_px


class DetectionMissingError(TaskFailureError):
    """Detection of the tracked object stayed absent for too many frames."""

    def __init__(self, task: str, image_ids: Sequence[str], streak: int):
        super().__init__(task, "detection_lost", image_ids)
        self.streak = streak


class ObjectNotFoundError(TaskFailureError):
    def __init__(self, image_ids: Sequence[str]):
        super().__init__("Find", "not_found", image_ids)
