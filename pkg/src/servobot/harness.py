"""Seeded experiment runners: one entry point per trial protocol.

Every runner is a pure function of (scenario config, seed, trial count): all
randomness flows through named per-trial streams so repeated runs produce
identical reports and parallel trial execution matches sequential execution
byte for byte. Stream layout per trial t: [seed, t, 0] drives the robot
context (detection draws), [seed, t, 1] the oracle annotator, [seed, t, 2]
the map depth oracle, and [seed, t, 3] scene construction.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import control as ctrl
from . import detector as det
from . import jacobian as jac
from . import kernels
from . import tfod
from .scenarios import (ABLATION_ARMS, Protocol, ScenarioConfig,
                        ScenarioError, TFOD_OFF_THRESHOLD, build_trial)

AnnotatorFactory = Callable[[int], object]


def versions() -> Dict[str, str]:
    """Environment fingerprint recorded in every report."""
    try:
        from importlib.metadata import version
        pkg = version("servobot")
    except Exception:
        pkg = "unknown"
    return {"package": pkg, "numpy": np.__version__,
            "backend": kernels.ACTIVE_BACKEND}


@dataclass
class TrialRun:
    """One executed trial plus the context needed to dump its artifacts."""

    label: str
    arm: Optional[str]
    report: tfod.TrialReport
    ctx: ctrl.RobotContext
    baseline: Dict[str, object] = field(default_factory=dict)

    def new_examples(self) -> int:
        return len(self.report.few_shot) - int(self.baseline.get("examples", 0))

    def new_per_task(self) -> Dict[str, int]:
        before = self.baseline.get("per_task", {})
        after = self.report.few_shot.per_task
        return {task.value: after.get(task, 0) - before.get(task.value, 0)
                for task in tfod.TaskId}

    def new_clicks(self) -> int:
        return self.report.few_shot.clicks - int(self.baseline.get("clicks", 0))

    def new_cpu_seconds(self) -> float:
        return (self.report.few_shot.cpu_seconds
                - float(self.baseline.get("cpu_seconds", 0.0)))


@dataclass
class RunReport:
    """Everything one `run` invocation produced, before serialization."""

    scenario: str
    protocol: str
    seed: int
    annotator: str
    trial_count: int
    versions: Dict[str, str]
    aggregates: dict
    trials: List[TrialRun] = field(default_factory=list)
    arms: Optional[Dict[str, dict]] = None
    sessions: List[jac.LearningSession] = field(default_factory=list)

    def to_json(self) -> dict:
        doc = {
            "scenario": self.scenario,
            "protocol": self.protocol,
            "seed": self.seed,
            "annotator": self.annotator,
            "trial_count": self.trial_count,
            "versions": dict(self.versions),
            "aggregates": self.aggregates,
            "trials": [dict(label=run.label, arm=run.arm,
                            new_examples=run.new_examples(),
                            new_per_task=run.new_per_task(),
                            new_clicks=run.new_clicks(),
                            new_cpu_seconds=run.new_cpu_seconds(),
                            **run.report.to_json())
                       for run in self.trials],
        }
        if self.arms is not None:
            doc["arms"] = self.arms
        if self.sessions:
            doc["sessions"] = [_session_json(s) for s in self.sessions]
        return doc


def _session_json(session: jac.LearningSession) -> dict:
    return {
        "formulation": session.formulation,
        "converged": session.converged,
        "updates_used": session.updates_used,
        "skipped_updates": session.skipped_updates,
        "robot_seconds": session.robot_seconds,
        "final": [[float(v) for v in row] for row in session.final.matrix],
    }


def aggregate_rates(reports: List[tfod.TrialReport]) -> dict:
    """Flag arithmetic over every object of every trial, done exactly."""
    objs = [o for rep in reports for o in rep.objects]
    n = len(objs)

    def pct(hits: int) -> float:
        return 100.0 * hits / n if n else 0.0

    placements = sum(rep.placements for rep in reports)
    robot_seconds = sum(rep.robot_seconds for rep in reports)
    return {
        "objects": n,
        "find_rate": pct(sum(1 for o in objs if o.find_ok)),
        "vs_rate": pct(sum(1 for o in objs if o.vs_ok)),
        "de_rate": pct(sum(1 for o in objs if o.de_ok)),
        "grasp_rate": pct(sum(1 for o in objs if o.grasp_ok)),
        "placements": placements,
        "robot_seconds": robot_seconds,
        "examples_total": sum(len(rep.few_shot) for rep in reports
                              if rep.few_shot is not None),
        "clicks_total": sum(rep.few_shot.clicks for rep in reports
                            if rep.few_shot is not None),
    }


def _run_one_trial(config: ScenarioConfig, seed: int, trial: int,
                   annotator=None, model: Optional[det.DetectorModel] = None,
                   few_shot: Optional[tfod.FewShotSet] = None,
                   threshold: Optional[float] = None,
                   annotate: bool = True,
                   label: Optional[str] = None,
                   arm: Optional[str] = None) -> TrialRun:
    setup = build_trial(config, trial, seed)
    ctx = ctrl.RobotContext(
        scene=setup.scene,
        model=model if model is not None
        else det.DetectorModel(params=config.detector_params),
        rng=np.random.default_rng([seed, trial, 0]),
        cam=setup.find_poses[0],
        threshold=config.confidence_threshold if threshold is None
        else threshold)
    if annotator is None:
        annotator = tfod.OracleAnnotator(np.random.default_rng([seed, trial, 1]))
    map_rng = (np.random.default_rng([seed, trial, 2])
               if config.map_oracle else None)
    trial_cfg = setup.trial_config(config, map_rng, annotate=annotate)
    baseline = {}
    if few_shot is not None:
        baseline = {
            "examples": len(few_shot),
            "clicks": few_shot.clicks,
            "cpu_seconds": few_shot.cpu_seconds,
            "per_task": {t.value: few_shot.per_task.get(t, 0)
                         for t in tfod.TaskId},
        }
    report = tfod.run_trial(ctx, setup.tasks, trial_cfg, annotator,
                            few_shot=few_shot, scheduler=setup.scheduler)
    return TrialRun(label=label or f"t{trial:02d}", arm=arm, report=report,
                    ctx=ctx, baseline=baseline)


def _trial_count(config: ScenarioConfig, trials: Optional[int]) -> int:
    n = config.default_trials if trials is None else trials
    if n < 1:
        raise ScenarioError("trial count must be at least 1")
    return n


def run_vs_learning(config: ScenarioConfig, seed: int,
                    trials: Optional[int] = None) -> RunReport:
    """Learning sessions for the configured update formulation."""
    raw = config.raw
    noise = jac.NoiseConfig(**raw.get("noise", {}))
    session_cfg = jac.SessionConfig(
        max_updates=int(raw.get("max_updates", jac.MAX_UPDATES_DEFAULT)))
    n = _trial_count(config, trials)
    sessions = [
        jac.run_learning_trial(raw["formulation"], noise,
                               np.random.default_rng([seed, t, 0]),
                               config=session_cfg,
                               seed_kind=raw.get("seed_kind"))
        for t in range(n)]
    updates = [s.updates_used for s in sessions]
    aggregates = {
        "formulation": raw["formulation"],
        "converged": sum(1 for s in sessions if s.converged),
        "mean_updates": sum(updates) / len(updates),
        "min_updates": min(updates),
        "max_updates": max(updates),
        "robot_seconds": sum(s.robot_seconds for s in sessions),
    }
    return RunReport(scenario=config.name, protocol=config.protocol.value,
                     seed=seed, annotator="none", trial_count=n,
                     versions=versions(), aggregates=aggregates,
                     sessions=sessions)


def run_trials(config: ScenarioConfig, seed: int,
               trials: Optional[int] = None,
               annotator_factory: Optional[AnnotatorFactory] = None,
               parallel: bool = False) -> List[TrialRun]:
    """Independent trials, fresh detector and example set each."""
    n = _trial_count(config, trials)

    def one(t: int) -> TrialRun:
        annotator = annotator_factory(t) if annotator_factory else None
        return _run_one_trial(config, seed, t, annotator=annotator)

    if parallel and n > 1:
        with ThreadPoolExecutor(max_workers=min(n, 8)) as pool:
            return list(pool.map(one, range(n)))
    return [one(t) for t in range(n)]


def run_vosvs(config: ScenarioConfig, seed: int,
              trials: Optional[int] = None,
              annotator_factory: Optional[AnnotatorFactory] = None,
              parallel: bool = False,
              annotator_name: str = "oracle") -> RunReport:
    runs = run_trials(config, seed, trials, annotator_factory, parallel)
    aggregates = aggregate_rates([r.report for r in runs])
    aggregates["examples_per_trial"] = [len(r.report.few_shot) for r in runs]
    n_objs = aggregates["objects"]
    if n_objs:
        aggregates["annotations_per_object"] = (
            aggregates["examples_total"] / n_objs)
        aggregates["annotation_seconds_per_object"] = (
            sum(r.report.few_shot.annotation_seconds for r in runs) / n_objs)
    return RunReport(scenario=config.name, protocol=config.protocol.value,
                     seed=seed, annotator=annotator_name,
                     trial_count=len(runs), versions=versions(),
                     aggregates=aggregates, trials=runs)


def _load_prior_file(config: ScenarioConfig):
    import json

    if config.prior_set_path is None:
        raise ScenarioError(
            f"scenario {config.name!r}: prior-annotation arms need either "
            f"the tfod_on_prior_off arm in the same run or a prior_set file")
    try:
        with open(config.prior_set_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ScenarioError(
            f"scenario {config.name!r}: cannot read prior_set file "
            f"{config.prior_set_path!r}: {err}") from err
    return doc["few_shot"], doc["model"]


def run_pick_place(config: ScenarioConfig, seed: int,
                   trials: Optional[int] = None,
                   annotator_factory: Optional[AnnotatorFactory] = None,
                   parallel: bool = False,
                   annotator_name: str = "oracle") -> RunReport:
    """Three-arm ablation: fresh TFOD, TFOD with prior set, prior set only.

    The first arm saves its per-trial example sets; the prior arms reload
    the matching trial's set (a deep copy via JSON) so each arm sees the
    same starting knowledge. The annotation-off arm additionally drops the
    confidence threshold and never updates the detector.
    """
    n = _trial_count(config, trials)
    arms = list(config.raw.get("ablations", ABLATION_ARMS))
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise ScenarioError(
            f"scenario {config.name!r}: unknown ablation arms {unknown}; "
            f"expected subset of {list(ABLATION_ARMS)}")
    prior: Dict[int, tuple] = {}
    if "tfod_on_prior_off" not in arms and any(
            a.endswith("prior_on") for a in arms):
        few_doc, model_doc = _load_prior_file(config)
        prior = {t: (few_doc, model_doc) for t in range(n)}

    runs: List[TrialRun] = []
    arm_aggregates: Dict[str, dict] = {}
    for arm in arms:
        arm_runs: List[TrialRun] = []
        for t in range(n):
            few_shot = model = None
            threshold = None
            annotate = True
            if arm != "tfod_on_prior_off":
                few_doc, model_doc = prior[t]
                few_shot = tfod.FewShotSet.from_json(few_doc)
                model = det.DetectorModel.from_json(model_doc)
            if arm == "tfod_off_prior_on":
                threshold = TFOD_OFF_THRESHOLD
                annotate = False
            annotator = annotator_factory(t) if annotator_factory else None
            run = _run_one_trial(config, seed, t, annotator=annotator,
                                 model=model, few_shot=few_shot,
                                 threshold=threshold, annotate=annotate,
                                 label=f"{arm}-t{t:02d}", arm=arm)
            if arm == "tfod_on_prior_off":
                prior[t] = (run.report.few_shot.to_json(),
                            run.ctx.model.to_json())
            arm_runs.append(run)
        arm_aggregates[arm] = aggregate_rates([r.report for r in arm_runs])
        runs.extend(arm_runs)
    aggregates = {"arms": arms, "trials_per_arm": n}
    return RunReport(scenario=config.name, protocol=config.protocol.value,
                     seed=seed, annotator=annotator_name,
                     trial_count=len(runs), versions=versions(),
                     aggregates=aggregates, trials=runs, arms=arm_aggregates)


def run_dynamic_place(config: ScenarioConfig, seed: int,
                      trials: Optional[int] = None,
                      annotator_factory: Optional[AnnotatorFactory] = None,
                      parallel: bool = False,
                      annotator_name: str = "oracle") -> RunReport:
    runs = run_trials(config, seed, trials, annotator_factory, parallel)
    reports = [r.report for r in runs]
    aggregates = aggregate_rates(reports)
    picks = aggregates["placements"]
    seconds = aggregates["robot_seconds"]
    aggregates["picks_per_hour"] = (3600.0 * picks / seconds
                                    if seconds > 0 else 0.0)
    aggregates["all_placed"] = picks == aggregates["objects"]
    return RunReport(scenario=config.name, protocol=config.protocol.value,
                     seed=seed, annotator=annotator_name,
                     trial_count=len(runs), versions=versions(),
                     aggregates=aggregates, trials=runs)


def run_scenario(config: ScenarioConfig, seed: int,
                 trials: Optional[int] = None,
                 annotator_factory: Optional[AnnotatorFactory] = None,
                 parallel: bool = False,
                 annotator_name: str = "oracle") -> RunReport:
    """Dispatch one scenario to its protocol runner."""
    if config.protocol is Protocol.VS_LEARNING:
        return run_vs_learning(config, seed, trials)
    if config.protocol is Protocol.VOSVS_BENCH:
        return run_vosvs(config, seed, trials, annotator_factory, parallel,
                         annotator_name)
    if config.protocol in (Protocol.PICK_PLACE, Protocol.PICK_PLACE_CLUTTER):
        return run_pick_place(config, seed, trials, annotator_factory,
                              parallel, annotator_name)
    return run_dynamic_place(config, seed, trials, annotator_factory,
                             parallel, annotator_name)
