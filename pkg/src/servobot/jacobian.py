"""Online learning of the 6x2 pseudoinverse feature Jacobian.

The model maps a bounding-box-center error (pixels) to a camera velocity
command. It is learned from scratch by rank-1 secant updates over a fixed
cycle of small planar motions, with a binary mask that confines learning to
the two entries coupling image x to camera x and image y to camera y.

Four update rules share one kernel and differ in step size, mask, and the
denominator/row-vector pair:

- ``masked``: residual-times-error-transpose over |de|^2, step 0.5, masked.
- ``vosvs``: residual times (dx^T Lhat) over dx^T Lhat de, step 1.0, masked.
  Undefined at a zero model, so it starts from a small seeded diagonal.
- ``broyden_bad``: the masked rule with step 1.0 and no mask; satisfies the
  secant condition Lhat' de = dx exactly after every update.
- ``broyden_good``: the vosvs rule with step 1.0 and no mask; also needs the
  seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import control as ctrl
from . import detector as det
from . import world as wd
from .errors import DetectionMissingError

CONVERGENCE_L1 = 1e-6
EPS_DE_SQ = 1.0          # px^2; skip updates from motions the image missed
EPS_DENOMINATOR = 1e-9
MAX_UPDATES_DEFAULT = 150
SEED_SCALE = 1e-3

# Permutations of {-5, 0, +5} cm on (x, y), zero motion excluded, ordered so
# the cycle returns the camera to its starting pose.
LEARNING_MOTIONS_CM: Tuple[Tuple[float, float], ...] = (
    (5.0, 5.0), (-5.0, 5.0), (-5.0, -5.0), (5.0, -5.0),
    (-5.0, 0.0), (5.0, 0.0), (0.0, -5.0), (0.0, 5.0),
)


def planar_mask() -> np.ndarray:
    """Ones at (x, s_x) and (y, s_y); everything else stays untouched."""
    h = np.zeros((6, 2), dtype=bool)
    h[0, 0] = True
    h[1, 1] = True
    return h


def full_mask() -> np.ndarray:
    return np.ones((6, 2), dtype=bool)


def seed_matrix() -> np.ndarray:
    """Small positive-diagonal start for the rules undefined at zero.

    The x entry deliberately starts with the opposite sign of the value the
    camera geometry produces; a generic positive gain guess is what a setup
    without calibration would use. The masked rule recovers quickly because
    pure-axis motions snap each active entry straight to its secant estimate;
    the unmasked rule pays for the mismatch with cross-entry error that takes
    many updates to contract.
    """
    m = np.zeros((6, 2), dtype=np.float64)
    m[0, 0] = SEED_SCALE
    m[1, 1] = SEED_SCALE
    return m


class DegenerateUpdateError(ZeroDivisionError):
    """Update denominator vanished; the step is undefined."""


@dataclass(frozen=True)
class PseudoJacobian:
    """Immutable 6x2 model state plus the update rule it was built with."""

    matrix: np.ndarray
    formulation: str = "masked"
    alpha: float = 0.5
    mask: np.ndarray = field(default_factory=planar_mask)
    updates_applied: int = 0

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (6, 2):
            raise ValueError("matrix must be 6x2")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        mask = np.array(self.mask, dtype=bool)
        if mask.shape != (6, 2):
            raise ValueError("mask must be 6x2")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)


def _rank1_step(matrix: np.ndarray, dx: np.ndarray, de: np.ndarray,
                alpha: float, mask: np.ndarray,
                transpose_denominator: bool) -> np.ndarray:
    residual = dx - matrix @ de
    if transpose_denominator:
        row = dx @ matrix            # (2,) = Lhat^T dx
        denom = float(row @ de)
    else:
        row = de
        denom = float(de @ de)
    if abs(denom) <= EPS_DENOMINATOR:
        raise DegenerateUpdateError(
            f"update denominator {denom!r} below {EPS_DENOMINATOR}")
    step = np.outer(residual, row) * (alpha / denom)
    out = matrix.copy()
    out[mask] += step[mask]
    return out


def _updated(pj: PseudoJacobian, dx, de, transpose_denominator: bool
             ) -> PseudoJacobian:
    dx = np.asarray(dx, dtype=np.float64)
    de = np.asarray(de, dtype=np.float64)
    if dx.shape != (6,) or de.shape != (2,):
        raise ValueError("dx must be a 6-vector and de a 2-vector")
    new = _rank1_step(pj.matrix, dx, de, pj.alpha, pj.mask,
                      transpose_denominator)
    return PseudoJacobian(matrix=new, formulation=pj.formulation,
                          alpha=pj.alpha, mask=pj.mask,
                          updates_applied=pj.updates_applied + 1)


def update_masked(pj: PseudoJacobian, dx, de) -> PseudoJacobian:
    """Rank-1 secant step over |de|^2, scaled by alpha and masked."""
    return _updated(pj, dx, de, transpose_denominator=False)


def update_vosvs(pj: PseudoJacobian, dx, de) -> PseudoJacobian:
    """Rank-1 step with row vector dx^T Lhat over denominator dx^T Lhat de."""
    return _updated(pj, dx, de, transpose_denominator=True)


def update_broyden_bad(pj: PseudoJacobian, dx, de) -> PseudoJacobian:
    """update_masked semantics; callers configure alpha=1 and a full mask."""
    return _updated(pj, dx, de, transpose_denominator=False)


def update_broyden_good(pj: PseudoJacobian, dx, de) -> PseudoJacobian:
    """update_vosvs semantics; callers configure alpha=1 and a full mask."""
    return _updated(pj, dx, de, transpose_denominator=True)


@dataclass(frozen=True)
class Formulation:
    name: str
    alpha: float
    masked: bool
    transpose_denominator: bool
    seeded: bool

    def initial(self, seed_kind: Optional[str] = None) -> PseudoJacobian:
        kind = seed_kind or ("seed" if self.seeded else "zeros")
        if kind == "zeros":
            matrix = np.zeros((6, 2))
        elif kind == "seed":
            matrix = seed_matrix()
        else:
            raise ValueError(f"unknown seed kind {kind!r}")
        return PseudoJacobian(
            matrix=matrix, formulation=self.name, alpha=self.alpha,
            mask=planar_mask() if self.masked else full_mask())

    def update(self, pj: PseudoJacobian, dx, de) -> PseudoJacobian:
        return _updated(pj, dx, de, self.transpose_denominator)


FORMULATIONS: Dict[str, Formulation] = {
    "masked": Formulation("masked", alpha=0.5, masked=True,
                          transpose_denominator=False, seeded=False),
    "vosvs": Formulation("vosvs", alpha=1.0, masked=True,
                         transpose_denominator=True, seeded=True),
    "broyden_bad": Formulation("broyden_bad", alpha=1.0, masked=False,
                               transpose_denominator=False, seeded=False),
    "broyden_good": Formulation("broyden_good", alpha=1.0, masked=False,
                                transpose_denominator=True, seeded=True),
}


def has_converged(prev: PseudoJacobian, curr: PseudoJacobian,
                  tol: float = CONVERGENCE_L1) -> bool:
    """L1 change between consecutive models strictly below tol."""
    return float(np.abs(curr.matrix - prev.matrix).sum()) < tol


@dataclass
class UpdateLogEntry:
    index: int
    motion_cm: Tuple[float, float]
    dx: np.ndarray
    de: np.ndarray
    delta_l1: float
    skipped: bool = False
    skip_reason: str = ""


@dataclass
class LearningSession:
    formulation: str
    converged: bool
    updates_used: int
    skipped_updates: int
    final: PseudoJacobian
    robot_seconds: float
    entries: List[UpdateLogEntry] = field(default_factory=list)


@dataclass(frozen=True)
class SessionConfig:
    motion_speed_m_s: float = 0.05
    settle_s: float = 0.3
    max_updates: int = MAX_UPDATES_DEFAULT
    detect_threshold: float = det.DEFAULT_CONFIDENCE_THRESHOLD
    actuation_noise: Optional[wd.ActuationNoise] = None
    convergence_tol: float = CONVERGENCE_L1


def _settled_feature(scene: wd.Scene, cam: wd.CameraPose, clock: wd.SimClock,
                     store: wd.SnapshotStore, model: det.DetectorModel,
                     rng: np.random.Generator, label: str,
                     monitor: ctrl.ServoMonitor,
                     threshold: float) -> np.ndarray:
    """Sample frames until the tracked class is detected; absence beyond the
    monitor's limit raises. Updates are effectively suspended while absent."""
    while True:
        rec = store.capture(scene, cam, clock, camera_speed=0.0)
        detections = det.detect(rec, model, rng, threshold)
        s = monitor.observe(detections, label)
        clock.tick()
        if s is not None:
            return s


def _run_motion(cam: wd.CameraPose, delta: np.ndarray, speed: float,
                clock: wd.SimClock, noise: Optional[wd.ActuationNoise],
                rng: np.random.Generator) -> wd.CameraPose:
    """Execute one commanded translation; returns the settled pose.

    Actuation error is sampled once per motion, then integrated smoothly, so
    the measured displacement differs from the commanded one the way a real
    base drifts (a commanded 5 cm step lands near but not on 5 cm).
    """
    actual = delta if noise is None else noise.perturb(delta.copy(), rng)
    distance = float(np.linalg.norm(actual[:3]))
    n_frames = max(1, int(math.ceil(distance / max(speed, 1e-9) / clock.dt)))
    clock.tick(n_frames)
    return wd.CameraPose(cam.x + actual[0], cam.y + actual[1],
                         cam.z + actual[2], cam.roll, cam.pitch,
                         wd.wrap_angle(cam.yaw + actual[5]))


def learn_session(scene: wd.Scene, target_label: str,
                  model: det.DetectorModel, formulation: str,
                  rng: np.random.Generator,
                  start_pose: wd.CameraPose,
                  config: SessionConfig = SessionConfig(),
                  clock: Optional[wd.SimClock] = None,
                  store: Optional[wd.SnapshotStore] = None,
                  seed_kind: Optional[str] = None) -> LearningSession:
    """Drive the motion cycle until the model converges or the budget ends."""
    form = FORMULATIONS[formulation]
    pj = form.initial(seed_kind)
    clock = clock or wd.SimClock()
    store = store or wd.SnapshotStore(keep_render_state=False)
    cam = start_pose
    s_star = np.array(scene.intrinsics.principal_point)
    # Open-loop measurement motions jump the feature on purpose, so the servo
    # discontinuity guard stays off; the absence guard stays on.
    monitor = ctrl.ServoMonitor(s_star=s_star, discontinuity_px=math.inf)
    settle_frames = max(1, int(round(config.settle_s / clock.dt)))

    entries: List[UpdateLogEntry] = []
    converged = False
    skipped = 0
    t_start = clock.t
    s_prev = _settled_feature(scene, cam, clock, store, model, rng,
                              target_label, monitor, config.detect_threshold)
    step = 0
    while pj.updates_applied < config.max_updates and not converged:
        motion_cm = LEARNING_MOTIONS_CM[step % len(LEARNING_MOTIONS_CM)]
        step += 1
        delta = np.array([motion_cm[0] / 100.0, motion_cm[1] / 100.0,
                          0.0, 0.0, 0.0, 0.0])
        pose_before = cam
        cam = _run_motion(cam, delta, config.motion_speed_m_s, clock,
                          config.actuation_noise, rng)
        clock.tick(settle_frames)
        s_now = _settled_feature(scene, cam, clock, store, model, rng,
                                 target_label, monitor,
                                 config.detect_threshold)
        dx = wd.pose_delta(pose_before, cam)
        de = s_now - s_prev
        s_prev = s_now
        if float(de @ de) <= EPS_DE_SQ:
            skipped += 1
            entries.append(UpdateLogEntry(
                index=step, motion_cm=motion_cm, dx=dx, de=de, delta_l1=0.0,
                skipped=True, skip_reason="feature_motion_too_small"))
            continue
        new_pj = form.update(pj, dx, de)
        delta_l1 = float(np.abs(new_pj.matrix - pj.matrix).sum())
        entries.append(UpdateLogEntry(index=step, motion_cm=motion_cm,
                                      dx=dx, de=de, delta_l1=delta_l1))
        converged = has_converged(pj, new_pj, config.convergence_tol)
        pj = new_pj

    return LearningSession(
        formulation=formulation, converged=converged,
        updates_used=pj.updates_applied, skipped_updates=skipped,
        final=pj, robot_seconds=clock.t - t_start, entries=entries)


@dataclass
class FormulationStats:
    formulation: str
    trials: int
    converged: int
    mean_updates: float
    min_updates: int
    max_updates: int
    dx_dsx_range: Tuple[float, float]
    dy_dsy_range: Tuple[float, float]
    cross_range: Tuple[float, float]
    mean_robot_seconds: float

    def to_json(self) -> dict:
        return {
            "formulation": self.formulation,
            "trials": self.trials,
            "converged": self.converged,
            "mean_updates": self.mean_updates,
            "min_updates": self.min_updates,
            "max_updates": self.max_updates,
            "dx_dsx_range": list(self.dx_dsx_range),
            "dy_dsy_range": list(self.dy_dsy_range),
            "cross_range": list(self.cross_range),
            "mean_robot_seconds": self.mean_robot_seconds,
        }


@dataclass(frozen=True)
class NoiseConfig:
    """Noise applied during learning runs; zeros give an exact simulation."""

    detection_jitter_px: float = 0.0
    detect_p: float = 1.0
    outlier_rate: float = 0.0
    outlier_px: float = 0.0
    actuation_mult_sigma: float = 0.0
    actuation_floor_m: float = 0.0

    def detector_params(self) -> det.DetectorParams:
        return det.DetectorParams(
            covered_detect_p=self.detect_p,
            covered_jitter_px=self.detection_jitter_px,
            uncovered_fp_per_frame=0.0,
            outlier_rate=self.outlier_rate,
            outlier_px=self.outlier_px)

    def actuation(self) -> Optional[wd.ActuationNoise]:
        if self.actuation_mult_sigma == 0.0 and self.actuation_floor_m == 0.0:
            return None
        return wd.ActuationNoise(mult_sigma=self.actuation_mult_sigma,
                                 floor_m=self.actuation_floor_m)

    def to_json(self) -> dict:
        return {
            "detection_jitter_px": self.detection_jitter_px,
            "detect_p": self.detect_p,
            "outlier_rate": self.outlier_rate,
            "outlier_px": self.outlier_px,
            "actuation_mult_sigma": self.actuation_mult_sigma,
            "actuation_floor_m": self.actuation_floor_m,
        }


NOISELESS = NoiseConfig()
# Detection jitter is the only noise source that perturbs the secant pair
# (displacement is measured, not assumed), so comparisons isolate it at the
# standard covered-bin level. The seed fixes one deterministic experiment.
DEFAULT_COMPARE_NOISE = NoiseConfig(detection_jitter_px=1.5, detect_p=0.99)
DEFAULT_COMPARE_SEED = 13

LEARNING_TARGET_LABEL = "ball"
LEARNING_BALL_RADIUS = 0.0285
LEARNING_WORKING_DEPTH = 0.315   # camera to ball equator


def standard_learning_setup() -> Tuple[wd.Scene, wd.CameraPose, str]:
    """One ball centered under the camera at the standard working depth."""
    ball = wd.SceneObject(
        obj_id="ball-0", class_label=LEARNING_TARGET_LABEL,
        shape=wd.SphereShape(radius=LEARNING_BALL_RADIUS),
        x=0.0, y=0.0, support_z=0.0)
    scene = wd.Scene([ball], name="learning")
    pose = wd.CameraPose(0.0, 0.0,
                         LEARNING_WORKING_DEPTH + ball.silhouette_z)
    return scene, pose, LEARNING_TARGET_LABEL


def learning_target_depth(scene: wd.Scene, pose: wd.CameraPose,
                          label: str) -> float:
    """Depth from the camera to the plane the tracked outline lives in."""
    obj = next(o for o in scene.objects if o.class_label == label)
    return pose.z - obj.silhouette_z


def covered_learning_model(scene: wd.Scene, pose: wd.CameraPose, label: str,
                           params: det.DetectorParams) -> det.DetectorModel:
    """Detector that already covers the target in its starting conditions."""
    obj = next(o for o in scene.objects if o.class_label == label)
    ctx = det.classify_context(pose.z - obj.top_z, 0.0, obj.in_clutter)
    return det.DetectorModel(params=params,
                             covered=frozenset({(label, ctx)}))


def run_learning_trial(formulation: str, noise: NoiseConfig,
                       rng: np.random.Generator,
                       config: Optional[SessionConfig] = None,
                       seed_kind: Optional[str] = None) -> LearningSession:
    scene, pose, label = standard_learning_setup()
    model = covered_learning_model(scene, pose, label,
                                   noise.detector_params())
    base = config or SessionConfig()
    cfg = SessionConfig(
        motion_speed_m_s=base.motion_speed_m_s, settle_s=base.settle_s,
        max_updates=base.max_updates, detect_threshold=base.detect_threshold,
        actuation_noise=noise.actuation(),
        convergence_tol=base.convergence_tol)
    return learn_session(scene, label, model, formulation, rng, pose,
                         config=cfg, seed_kind=seed_kind)


@dataclass
class ComparisonReport:
    trials: int
    seed: int
    noise: NoiseConfig
    stats: List[FormulationStats]
    sessions: Dict[str, List[LearningSession]] = field(default_factory=dict)

    def stats_for(self, formulation: str) -> FormulationStats:
        return next(s for s in self.stats if s.formulation == formulation)

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "noise": self.noise.to_json(),
            "formulations": [s.to_json() for s in self.stats],
        }


def compare_formulations(n_trials: int, noise: NoiseConfig, seed: int,
                         formulations: Optional[Sequence[str]] = None,
                         seed_kind: Optional[str] = None) -> ComparisonReport:
    """Run every update rule over the same trial schedule.

    Each (formulation, trial) pair draws its noise from an independent,
    deterministic stream, so trials can run in any order or in parallel and
    still reproduce byte-identical statistics.
    """
    names = list(formulations or FORMULATIONS)
    sessions: Dict[str, List[LearningSession]] = {n: [] for n in names}
    for name in names:
        for trial in range(n_trials):
            rng = np.random.default_rng([seed, trial, _form_index(name)])
            sessions[name].append(
                run_learning_trial(name, noise, rng, seed_kind=seed_kind))
    stats = [session_stats(sessions[n], n) for n in names]
    return ComparisonReport(trials=n_trials, seed=seed, noise=noise,
                            stats=stats, sessions=sessions)


def _form_index(name: str) -> int:
    return list(FORMULATIONS).index(name)


def session_stats(sessions: Sequence[LearningSession],
                  formulation: str) -> FormulationStats:
    updates = [s.updates_used for s in sessions]
    finals = [s.final.matrix for s in sessions]
    dxx = [m[0, 0] for m in finals]
    dyy = [m[1, 1] for m in finals]
    cross = [v for m in finals for v in (m[0, 1], m[1, 0])]
    return FormulationStats(
        formulation=formulation,
        trials=len(sessions),
        converged=sum(1 for s in sessions if s.converged),
        mean_updates=float(np.mean(updates)),
        min_updates=int(min(updates)),
        max_updates=int(max(updates)),
        dx_dsx_range=(float(min(dxx)), float(max(dxx))),
        dy_dsy_range=(float(min(dyy)), float(max(dyy))),
        cross_range=(float(min(cross)), float(max(cross))),
        mean_robot_seconds=float(np.mean([s.robot_seconds
                                          for s in sessions])),
    )
