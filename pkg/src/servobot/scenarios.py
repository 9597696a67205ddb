"""Scenario catalog: packaged scene fixtures and per-trial world builders.

A scenario file names a protocol and carries everything the harness needs to
rebuild its worlds deterministically: object shapes, slot layout, camera
height, detector emission parameters, and (for placement runs) the scripted
bin schedule. Files ship inside the package under scenes/; the CLI accepts
either a bare scenario name or a path to a compatible JSON document.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detector as det
from . import world as wd
from .tfod import MapDepthOracle, TrialConfig, TrialTask


class ScenarioError(ValueError):
    """A scenario document is missing, malformed, or incomplete."""


class Protocol(Enum):
    VS_LEARNING = "vs_learning"
    VOSVS_BENCH = "vosvs_bench"
    PICK_PLACE = "pick_place"
    PICK_PLACE_CLUTTER = "pick_place_clutter"
    DYNAMIC_PLACE = "dynamic_place"


ABLATION_ARMS = ("tfod_on_prior_off", "tfod_on_prior_on",
                 "tfod_off_prior_on")
TFOD_OFF_THRESHOLD = 0.1


def scenario_names() -> List[str]:
    """Names of the scenario fixtures shipped with the package."""
    scenes = resources.files("servobot").joinpath("scenes")
    return sorted(p.name[:-5] for p in scenes.iterdir()
                  if p.name.endswith(".json"))


def load_scenario(name_or_path: str) -> "ScenarioConfig":
    """Load a scenario by packaged name or by file path."""
    if os.path.isfile(name_or_path):
        with open(name_or_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return ScenarioConfig.from_json(doc)
    stem = name_or_path[:-5] if name_or_path.endswith(".json") \
        else name_or_path
    candidate = resources.files("servobot").joinpath("scenes",
                                                     f"{stem}.json")
    if not candidate.is_file():
        raise ScenarioError(
            f"unknown scenario {name_or_path!r}; packaged scenarios: "
            f"{', '.join(scenario_names())}")
    return ScenarioConfig.from_json(json.loads(candidate.read_text()))


def _require(doc: dict, keys: Sequence[str], name: str) -> None:
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ScenarioError(
            f"scenario {name!r} is missing fields: {', '.join(missing)}")


@dataclass
class ScenarioConfig:
    """Parsed scenario document plus the protocol-specific raw sections."""

    name: str
    protocol: Protocol
    detector_params: det.DetectorParams
    confidence_threshold: float
    camera_z: float
    servo_gain_depth_m: float
    default_trials: int
    annotator: str
    sentry: bool
    map_oracle: bool
    map_sigma_m: float
    prior_set_path: Optional[str]
    raw: dict = field(repr=False)

    @staticmethod
    def from_json(doc: dict) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ScenarioError("scenario document must be a JSON object")
        _require(doc, ["name", "protocol"], str(doc.get("name", "?")))
        try:
            protocol = Protocol(doc["protocol"])
        except ValueError:
            raise ScenarioError(
                f"unknown protocol {doc['protocol']!r}; expected one of "
                f"{[p.value for p in Protocol]}") from None
        name = str(doc["name"])
        needed = {
            Protocol.VS_LEARNING: ["formulation"],
            Protocol.VOSVS_BENCH: ["objects", "trial_objects",
                                   "support_heights", "slot_xs"],
            Protocol.PICK_PLACE: ["scene", "tasks", "find_poses"],
            Protocol.PICK_PLACE_CLUTTER: ["scene", "tasks", "find_poses"],
            Protocol.DYNAMIC_PLACE: ["scene", "tasks", "find_poses"],
        }[protocol]
        _require(doc, needed, name)
        return ScenarioConfig(
            name=name,
            protocol=protocol,
            detector_params=det.DetectorParams.from_json(
                doc.get("detector_params", {})),
            confidence_threshold=float(doc.get("confidence_threshold",
                                               det.DEFAULT_CONFIDENCE_THRESHOLD)),
            camera_z=float(doc.get("camera_z", 0.95)),
            servo_gain_depth_m=float(doc.get("servo_gain_depth_m", 0.5)),
            default_trials=int(doc.get("trials", 1)),
            annotator=str(doc.get("annotator", "oracle")),
            sentry=bool(doc.get("sentry", False)),
            map_oracle=bool(doc.get("map_oracle", False)),
            map_sigma_m=float(doc.get("map_sigma_m", 0.01)),
            prior_set_path=doc.get("prior_set"),
            raw=doc,
        )


def servo_gain_matrix(depth_m: float,
                      focal_px: float = wd.DEFAULT_FOCAL_PX) -> np.ndarray:
    """Diagonal feature-Jacobian pseudoinverse for a nominal depth."""
    lhat = np.zeros((6, 2))
    lhat[0, 0] = -depth_m / focal_px
    lhat[1, 1] = depth_m / focal_px
    return lhat


def _pose(xyz: Sequence[float]) -> wd.CameraPose:
    return wd.CameraPose(float(xyz[0]), float(xyz[1]), float(xyz[2]))


@dataclass
class TrialSetup:
    """Everything run_trial needs for one trial of a scenario."""

    scene: wd.Scene
    tasks: List[TrialTask]
    find_poses: List[wd.CameraPose]
    place_find_poses: Optional[List[wd.CameraPose]] = None
    scheduler: Optional[Callable] = None
    remove_after_attempt: bool = True

    def trial_config(self, config: ScenarioConfig,
                     map_rng: Optional[np.random.Generator] = None,
                     annotate: bool = True) -> TrialConfig:
        oracle = None
        if config.map_oracle:
            if map_rng is None:
                raise ScenarioError(
                    f"scenario {config.name!r} uses the map oracle and "
                    f"needs a dedicated rng stream")
            oracle = MapDepthOracle(map_rng, sigma_m=config.map_sigma_m)
        return TrialConfig(
            find_poses=self.find_poses,
            lhat=servo_gain_matrix(config.servo_gain_depth_m,
                                   self.scene.intrinsics.focal_px),
            place_find_poses=self.place_find_poses,
            sentry=config.sentry,
            annotate=annotate,
            map_oracle=oracle,
            remove_after_attempt=self.remove_after_attempt,
        )


def _tasks_from_json(entries: Sequence[dict]) -> List[TrialTask]:
    return [TrialTask(object_id=e["object_id"], class_label=e["class"],
                      place_label=e.get("place_label"))
            for e in entries]


def build_vosvs_trial(config: ScenarioConfig, trial: int,
                      seed: int) -> TrialSetup:
    """One benchmark trial: three pool objects on staggered supports."""
    doc = config.raw
    pool = doc["objects"]
    triples = doc["trial_objects"]
    if trial >= len(triples):
        raise ScenarioError(
            f"scenario {config.name!r} defines {len(triples)} trials, "
            f"trial index {trial} requested")
    heights = [float(h) for h in doc["support_heights"]]
    slot_xs = [float(x) for x in doc["slot_xs"]]
    rng = np.random.default_rng([seed, trial, 3])
    objects, tasks, poses = [], [], []
    for slot, pool_index in enumerate(triples[trial]):
        template = pool[pool_index]
        label = template["class"]
        obj = wd.SceneObject(
            obj_id=f"{label}-{slot}",
            class_label=label,
            shape=wd.shape_from_json(template["shape"]),
            x=slot_xs[slot],
            y=0.0,
            yaw=float(rng.uniform(0.0, math.pi)),
            support_z=heights[slot],
        )
        objects.append(obj)
        tasks.append(TrialTask(object_id=obj.obj_id, class_label=label))
        poses.append(wd.CameraPose(slot_xs[slot], 0.0, config.camera_z))
    scene = wd.Scene(objects, name=f"{config.name}-t{trial}")
    return TrialSetup(scene=scene, tasks=tasks, find_poses=poses)


def build_fixture_trial(config: ScenarioConfig) -> TrialSetup:
    """Trial built verbatim from an explicit scene fixture."""
    doc = config.raw
    scene = wd.Scene.from_json(doc["scene"])
    scene.name = config.name
    tasks = _tasks_from_json(doc["tasks"])
    known = {o.obj_id for o in scene.objects}
    for task in tasks:
        if task.object_id not in known and not config.sentry:
            raise ScenarioError(
                f"scenario {config.name!r}: task object "
                f"{task.object_id!r} is not in the scene")
    find_poses = [_pose(p) for p in doc["find_poses"]]
    place_poses = ([_pose(p) for p in doc["place_find_poses"]]
                   if "place_find_poses" in doc else None)
    scheduler = None
    if "schedule" in doc:
        scheduler = _bin_scheduler(doc["schedule"])
    return TrialSetup(scene=scene, tasks=tasks, find_poses=find_poses,
                      place_find_poses=place_poses, scheduler=scheduler,
                      remove_after_attempt=True)


def _bin_scheduler(schedule: Sequence[Dict[str, Sequence[float]]]):
    """Scripted bin repositioning, applied before each pick.

    Objects resting on a moved bin (earlier placements) ride along so the
    world stays physically coherent.
    """

    def move_bins(ctx, index: int) -> None:
        if index >= len(schedule):
            return
        for obj_id, xy in schedule[index].items():
            obj = ctx.scene.get(obj_id)
            nx, ny = float(xy[0]), float(xy[1])
            riders = [o for o in ctx.scene.objects
                      if o is not obj and o.support_z == obj.top_z
                      and obj.contains_xy(o.x, o.y)]
            dx, dy = nx - obj.x, ny - obj.y
            obj.x, obj.y = nx, ny
            for rider in riders:
                rider.x += dx
                rider.y += dy

    return move_bins


def build_trial(config: ScenarioConfig, trial: int, seed: int) -> TrialSetup:
    """Dispatch to the protocol's trial builder."""
    if config.protocol is Protocol.VS_LEARNING:
        raise ScenarioError(
            "vs_learning scenarios use the learning session runner, "
            "not the trial chain")
    if config.protocol is Protocol.VOSVS_BENCH:
        return build_vosvs_trial(config, trial, seed)
    return build_fixture_trial(config)


def class_vocabulary(config: ScenarioConfig) -> List[str]:
    """Every class an annotator may label in this scenario."""
    if config.protocol is Protocol.VOSVS_BENCH:
        labels = {t["class"] for t in config.raw["objects"]}
    else:
        labels = {o["class"] for o in
                  config.raw.get("scene", {}).get("objects", [])}
        labels.update(t["class"] for t in config.raw.get("tasks", []))
        labels.update(t["place_label"] for t in config.raw.get("tasks", [])
                      if t.get("place_label"))
    return sorted(labels)
