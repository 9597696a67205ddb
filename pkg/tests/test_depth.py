"""Depth-from-approach tests: least-squares oracles and the descent task."""
import numpy as np
import pytest

from servobot import control as ctrl
from servobot import depth as dep
from servobot import detector as det
from servobot import jacobian as jac
from servobot import world as wd
from servobot.errors import DetectionMissingError, TaskFailureError

NOISELESS_PARAMS = det.DetectorParams(covered_detect_p=1.0,
                                      covered_jitter_px=0.0,
                                      uncovered_fp_per_frame=0.0)


def analytic_lhat(depth):
    m = np.zeros((6, 2))
    m[0, 0] = -depth / 525.0
    m[1, 1] = depth / 525.0
    return m


def make_ctx(start_depth=jac.LEARNING_WORKING_DEPTH, seed=0, params=None,
             bins=None):
    scene, pose, label = jac.standard_learning_setup()
    if start_depth != jac.LEARNING_WORKING_DEPTH:
        pose = pose.moved(dz=start_depth - jac.LEARNING_WORKING_DEPTH)
    model = det.covered_model([label], params=params or NOISELESS_PARAMS,
                              bins=bins)
    ctx = ctrl.RobotContext(scene=scene, model=model,
                            rng=np.random.default_rng([seed, 0]), cam=pose)
    return ctx, label


def fresh_log(rows):
    log = dep.DepthObservationLog(reference_pose=wd.CameraPose(0.0, 0.0, 0.5))
    for i, (t, h) in enumerate(rows):
        log.append(t, h, f"img-{i:06d}")
    return log


def test_box_size_is_geometric_mean():
    assert dep.box_size_px(100.0, 64.0) == pytest.approx(80.0, abs=1e-12)


def test_fit_reference_depth_exact_oracle():
    # f*S = 50: sizes 100, 125, 166.67 at travels 0, 0.1, 0.2 from 0.5 m.
    travels = [0.0, 0.1, 0.2]
    sizes = [50.0 / (0.5 - d) for d in travels]
    for weighting in ("size", "uniform"):
        z0, c = dep.fit_reference_depth(travels, sizes, weighting)
        assert z0 == pytest.approx(0.5, rel=1e-9)
        assert c == pytest.approx(50.0, rel=1e-9)


def test_fit_weightings_agree_on_clean_data():
    travels = np.linspace(0.0, 0.3, 12)
    sizes = 60.0 / (0.62 - travels)
    zw, _ = dep.fit_reference_depth(travels, sizes, "size")
    zu, _ = dep.fit_reference_depth(travels, sizes, "uniform")
    assert zw == pytest.approx(zu, rel=1e-9)
    assert zw == pytest.approx(0.62, rel=1e-9)


def test_fit_rejects_unknown_weighting():
    with pytest.raises(ValueError):
        dep.fit_reference_depth([0.0, 0.1], [10.0, 12.0], "huber")


def test_fit_rank_deficiency():
    with pytest.raises(dep.RankDeficientError):
        dep.fit_reference_depth([0.1], [120.0])
    with pytest.raises(dep.RankDeficientError):
        dep.fit_reference_depth([0.1, 0.1, 0.1], [120.0, 121.0, 119.0])


def test_fit_negative_reference_depth_raises():
    # Size shrinking while approaching implies a target behind the camera.
    with pytest.raises(dep.NegativeDepthError):
        dep.fit_reference_depth([0.0, 0.1], [100.0, 80.0])


def test_ls_depth_oracle():
    log = fresh_log([(d, 50.0 / (0.5 - d)) for d in (0.0, 0.1, 0.2)])
    assert dep.ls_depth(log) == pytest.approx(0.3, rel=1e-9)


def test_ls_depth_overshoot_raises():
    # The fit itself is positive, but the camera has already passed it.
    log = fresh_log([(0.0, 100.0), (0.19, 10000.0), (0.2, 10000.0)])
    z0, _ = dep.fit_reference_depth(log.travels(), log.sizes())
    assert z0 > 0.0
    with pytest.raises(dep.NegativeDepthError):
        dep.ls_depth(log)


def test_log_validates_rows():
    log = fresh_log([(0.0, 100.0), (0.05, 110.0)])
    assert len(log) == 2
    assert log.last_travel_m == 0.05
    with pytest.raises(ValueError):
        log.append(0.04, 115.0, "img-000002")  # travel went backwards
    with pytest.raises(ValueError):
        log.append(0.06, 0.0, "img-000003")  # degenerate size
    assert dep.DepthObservationLog(
        reference_pose=wd.CameraPose(0.0, 0.0, 0.5)).last_travel_m == 0.0


def test_median_aggregate():
    assert dep.median_aggregate([0.21, 0.19, 0.50]) == pytest.approx(0.21)
    assert dep.median_aggregate([0.4]) == pytest.approx(0.4)
    assert dep.median_aggregate([0.1, 0.2, 0.3, 0.4]) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        dep.median_aggregate([])


def test_series_enforces_checkpoint_spacing():
    series = dep.DepthEstimateSeries()
    series.append(dep.DepthCheckpoint(0.05, 100.0, 0.4, 0.35))
    with pytest.raises(ValueError):
        series.append(dep.DepthCheckpoint(0.099, 105.0, 0.4, 0.301))
    series.append(dep.DepthCheckpoint(0.1 - 1e-10, 105.0, 0.4, 0.3))
    assert len(series) == 2


def test_series_estimates_need_finalization():
    series = dep.DepthEstimateSeries()
    series.append(dep.DepthCheckpoint(0.05, 100.0, 0.40, 0.35))
    series.append(dep.DepthCheckpoint(0.10, 120.0, 0.42, 0.32))
    with pytest.raises(ValueError):
        series.estimates_at_final()
    series.final_travel_m = 0.10
    assert series.estimates_at_final() == pytest.approx([0.30, 0.32])
    assert series.final_median == pytest.approx(0.31)


def test_series_csv_rows_exact():
    series = dep.DepthEstimateSeries()
    series.append(dep.DepthCheckpoint(0.05, 100.0, 0.315, 0.265))
    rows = series.csv_rows()
    assert rows[0] == "travel_m,size_px,reference_depth_m,current_depth_m"
    assert rows[1] == "0.05,100.0,0.315,0.265"
    assert float(rows[1].split(",")[2]) == 0.315


def test_noiseless_descent_recovers_depth_exactly():
    ctx, label = make_ctx()
    result = dep.run_depth_task(ctx, label,
                                analytic_lhat(jac.LEARNING_WORKING_DEPTH))
    travels = [c.travel_m for c in result.series.checkpoints]
    assert travels == pytest.approx([0.05, 0.10, 0.15], abs=1e-9)
    for ckpt in result.series.checkpoints:
        assert ckpt.reference_depth_m == pytest.approx(0.315, rel=1e-9)
    assert result.series.final_median == pytest.approx(0.165, rel=1e-9)
    assert result.remaining_m == result.series.final_median
    assert result.monitor.task == "Depth"
    t = result.log.travels()
    assert np.all(np.diff(t) >= 0.0)


def test_noiseless_descent_is_deterministic():
    rows = []
    for _ in range(2):
        ctx, label = make_ctx(seed=4)
        result = dep.run_depth_task(
            ctx, label, analytic_lhat(jac.LEARNING_WORKING_DEPTH))
        rows.append("\n".join(result.series.csv_rows()))
    assert rows[0] == rows[1]


def test_noiseless_checkpoint_errors_stay_settled():
    # From farther out the series has 8 checkpoints; after the third, the
    # absolute error of each running estimate must not grow.
    ctx, label = make_ctx(start_depth=0.6)
    result = dep.run_depth_task(ctx, label, analytic_lhat(0.6))
    assert len(result.series) >= 6
    errs = [abs(c.current_depth_m - (0.6 - c.travel_m))
            for c in result.series.checkpoints]
    for a, b in zip(errs[2:], errs[3:]):
        assert b <= a + 1e-12


def test_noisy_descents_hit_five_percent_mostly():
    params = det.DetectorParams(covered_detect_p=0.99, covered_jitter_px=1.5,
                                uncovered_fp_per_frame=0.0)
    good = 0
    for seed in range(30):
        ctx, label = make_ctx(seed=seed, params=params)
        result = dep.run_depth_task(
            ctx, label, analytic_lhat(jac.LEARNING_WORKING_DEPTH))
        true_remaining = ctx.cam.z - (
            ctx.scene.get("ball-0").support_z
            + ctx.scene.get("ball-0").shape.radius)
        if abs(result.remaining_m - true_remaining) / true_remaining <= 0.05:
            good += 1
    assert good >= 27


def test_descent_detection_loss_raises_depth_task_error():
    # Coverage limited to the mid distance band: the approach crosses into
    # the near band where detections stop, and the streak limit fires.
    params = det.DetectorParams(covered_detect_p=1.0, covered_jitter_px=0.0,
                                uncovered_detect_p=0.0,
                                uncovered_fp_per_frame=0.0)
    bins = [det.ContextBin("mid", False, False)]
    ctx, label = make_ctx(start_depth=0.45 + 0.0285, params=params,
                          bins=bins)
    with pytest.raises(DetectionMissingError) as err:
        dep.run_depth_task(ctx, label, analytic_lhat(0.45))
    assert err.value.task == "Depth"
    assert err.value.reason == "detection_lost"
    assert err.value.image_ids


def test_descent_altitude_floor_raises_estimate_diverged():
    ctx, label = make_ctx()
    with pytest.raises(TaskFailureError) as err:
        dep.run_depth_task(ctx, label,
                           analytic_lhat(jac.LEARNING_WORKING_DEPTH),
                           min_altitude_m=0.5)
    assert err.value.task == "Depth"
    assert err.value.reason == "estimate_diverged"


def test_descent_stops_before_hitting_the_object():
    # A stop threshold of zero would drive the camera into the ball; the
    # collision guard must turn that into a diverged-estimate failure.
    ctx, label = make_ctx()
    with pytest.raises(TaskFailureError) as err:
        dep.run_depth_task(ctx, label,
                           analytic_lhat(jac.LEARNING_WORKING_DEPTH),
                           stop_m=0.0, min_altitude_m=0.0)
    assert err.value.reason == "estimate_diverged"


def test_collision_probe():
    ball = wd.SceneObject(obj_id="b", class_label="ball",
                          shape=wd.SphereShape(radius=0.03), x=0.0, y=0.0)
    scene = wd.Scene([ball])
    assert dep._collided(scene, wd.CameraPose(0.0, 0.0, 0.05))
    assert not dep._collided(scene, wd.CameraPose(0.0, 0.0, 0.2))
    assert not dep._collided(scene, wd.CameraPose(0.2, 0.0, 0.05))
