"""Servo control law, tracking monitor, and closed-loop context tests."""
import math

import numpy as np
import pytest

from servobot import control as ctrl
from servobot import detector as det
from servobot import world as wd
from servobot.errors import DetectionMissingError, ServoDiscontinuityError

NOISELESS_PARAMS = det.DetectorParams(covered_detect_p=1.0,
                                      covered_jitter_px=0.0,
                                      uncovered_fp_per_frame=0.0)


def diag_lhat(z=0.5, f=525.0):
    m = np.zeros((6, 2))
    m[0, 0] = -z / f
    m[1, 1] = z / f
    return m


def box_at(center, label="cup", size=40.0, conf=0.95):
    return det.BoundingBox(center=center, width=size, height=size,
                           class_label=label, confidence=conf)


def frame(boxes, image_id="img-000000"):
    return det.DetectionSet(image_id=image_id, threshold=0.9,
                            boxes=tuple(boxes))


def make_ctx(obj_xy=(0.05, -0.04), depth=0.5, seed=0, label="cup"):
    obj = wd.SceneObject(obj_id="c0", class_label=label,
                         shape=wd.CylinderShape(radius=0.03, height=0.05),
                         x=obj_xy[0], y=obj_xy[1])
    scene = wd.Scene([obj])
    model = det.covered_model([label], params=NOISELESS_PARAMS)
    cam = wd.CameraPose(0.0, 0.0, depth + obj.top_z)
    return ctrl.RobotContext(scene=scene, model=model,
                             rng=np.random.default_rng(seed), cam=cam)


def test_feedback_error():
    e = ctrl.feedback_error(np.array([300.0, 200.0]),
                            np.array([320.0, 240.0]))
    assert e == pytest.approx([-20.0, -40.0])


def test_control_law_oracle():
    lhat = np.zeros((6, 2))
    lhat[0, 0] = -6e-4
    lhat[1, 1] = 6e-4
    v = ctrl.control(lhat, np.array([50.0, -20.0]))
    assert v[0] == pytest.approx(0.030, abs=1e-12)
    assert v[1] == pytest.approx(0.012, abs=1e-12)
    assert np.all(v[2:] == 0.0)


def test_control_clamps_per_axis():
    lhat = diag_lhat()
    v = ctrl.control(lhat, np.array([2000.0, -2000.0]))
    assert v[0] == pytest.approx(0.1)
    assert v[1] == pytest.approx(0.1)
    # Axes with a zero limit can never move.
    lhat_rot = np.zeros((6, 2))
    lhat_rot[3, 0] = 1.0
    lhat_rot[4, 1] = 1.0
    v = ctrl.control(lhat_rot, np.array([100.0, 100.0]))
    assert v[3] == 0.0 and v[4] == 0.0


def test_control_is_linear_below_the_clamp():
    lhat = diag_lhat()
    e = np.array([20.0, -10.0])
    v1 = ctrl.control(lhat, e)
    v2 = ctrl.control(lhat, 2.0 * e)
    assert np.allclose(v2, 2.0 * v1, atol=1e-15)


def test_control_validates_shape():
    with pytest.raises(ValueError):
        ctrl.control(np.zeros((2, 6)), np.zeros(2))


def test_masked_rows_produce_zero_velocity():
    lhat = diag_lhat()
    v = ctrl.control(lhat, np.array([35.0, 12.0]))
    assert np.all(v[2:] == 0.0)


def test_servo_converged_uses_max_norm():
    assert ctrl.servo_converged(np.array([9.0, -9.0]), 10.0)
    assert not ctrl.servo_converged(np.array([9.0, -9.0]), 5.0)
    assert ctrl.servo_converged(np.array([10.0, 0.0]), 10.0)


def test_monitor_first_selection_is_nearest_setpoint():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    near = box_at((330.0, 250.0))
    far = box_at((100.0, 80.0))
    s = mon.observe(frame([far, near]), "cup")
    assert s == pytest.approx([330.0, 250.0])
    assert mon.last_box is near


def test_monitor_tracks_previous_feature_not_setpoint():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    mon.observe(frame([box_at((200.0, 200.0))]), "cup")
    # Next frame: a distractor sits right on the setpoint, the true object
    # has moved slightly; the monitor must stay with the tracked feature.
    s = mon.observe(frame([box_at((320.0, 240.0)), box_at((210.0, 205.0))],
                          "img-000001"), "cup")
    assert s == pytest.approx([210.0, 205.0])


def test_monitor_discontinuity_raises():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    mon.observe(frame([box_at((320.0, 240.0))]), "cup")
    with pytest.raises(ServoDiscontinuityError) as err:
        mon.observe(frame([box_at((425.0, 345.0))], "img-000001"), "cup")
    assert err.value.reason == "feature_discontinuity"
    # L1 jump of exactly the threshold is still acceptable.
    mon2 = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    mon2.observe(frame([box_at((320.0, 240.0))]), "cup")
    s = mon2.observe(frame([box_at((395.0, 315.0))], "img-000001"), "cup")
    assert s is not None


def test_monitor_no_discontinuity_check_on_first_selection():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    s = mon.observe(frame([box_at((10.0, 10.0))]), "cup")
    assert s == pytest.approx([10.0, 10.0])


def test_monitor_missing_streak_raises_at_limit():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    mon.observe(frame([box_at((320.0, 240.0))]), "cup")
    for i in range(19):
        assert mon.observe(frame([], f"img-{i + 1:06d}"), "cup") is None
    with pytest.raises(DetectionMissingError) as err:
        mon.observe(frame([], "img-000020"), "cup")
    assert err.value.task == "Servo"
    assert err.value.reason == "detection_lost"


def test_monitor_streak_resets_on_detection():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    for i in range(19):
        mon.observe(frame([], f"img-{i:06d}"), "cup")
    assert mon.observe(frame([box_at((320.0, 240.0))], "img-000019"),
                       "cup") is not None
    assert mon.missing_streak == 0
    for i in range(19):
        assert mon.observe(frame([], f"img-{20 + i:06d}"), "cup") is None


def test_monitor_keeps_bounded_recent_ids():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    for i in range(60):
        mon.observe(frame([box_at((320.0, 240.0))], f"img-{i:06d}"), "cup")
    assert len(mon.recent_image_ids) == mon.missing_limit + 1
    assert mon.recent_image_ids[-1] == "img-000059"


def test_monitor_ignores_other_classes():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    assert mon.observe(frame([box_at((320.0, 240.0), label="ball")]),
                       "cup") is None
    assert mon.missing_streak == 1


def test_command_motion_noiseless_is_exact():
    ctx = make_ctx()
    delta = np.array([0.02, -0.01, 0.03, 0.0, 0.0, 0.0])
    before_frame = ctx.clock.frame
    measured = ctx.command_motion(delta, speed=0.05)
    # Exact up to the one float round trip through absolute coordinates.
    assert measured == pytest.approx(delta, abs=1e-15)
    assert ctx.cam.x == pytest.approx(0.02, abs=1e-15)
    dist = float(np.linalg.norm(delta[:3]))
    n = math.ceil(dist / 0.05 / ctx.clock.dt)
    assert ctx.clock.frame - before_frame == n
    assert len(ctx.store) == 0  # no monitor, no captures


def test_command_motion_with_noise_differs_but_only_on_driven_axes():
    ctx = make_ctx()
    ctx.actuation = wd.ActuationNoise(mult_sigma=0.05, floor_m=0.001)
    delta = np.array([0.05, 0.0, 0.0, 0.0, 0.0, 0.0])
    measured = ctx.command_motion(delta, speed=0.05)
    assert measured[0] != 0.05
    assert abs(measured[0] - 0.05) < 0.03
    assert np.all(measured[1:] == 0.0)


def test_command_motion_observes_frames_with_monitor():
    ctx = make_ctx()
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    delta = np.array([0.02, 0.0, 0.0, 0.0, 0.0, 0.0])
    ctx.command_motion(delta, speed=0.05, monitor=mon, class_label="cup")
    n = math.ceil(0.02 / 0.05 / ctx.clock.dt)
    assert len(ctx.store) == n
    assert mon.last_box is not None


def test_command_motion_detection_loss_surfaces_mid_move():
    ctx = make_ctx()
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    with pytest.raises(DetectionMissingError):
        # Tracking a class that is never present fails within the move.
        ctx.command_motion(np.array([0.08, 0.0, 0.0, 0.0, 0.0, 0.0]),
                           speed=0.05, monitor=mon, class_label="ghost")


def test_servo_to_converges_on_static_target():
    ctx = make_ctx()
    res = ctrl.servo_to(ctx, "cup", diag_lhat(), tol_px=5.0)
    assert res.converged
    assert res.frames < 200
    assert np.max(np.abs(res.final_error)) <= 5.0
    # The camera ends nearly over the object.
    assert ctx.cam.x == pytest.approx(0.05, abs=0.01)
    assert ctx.cam.y == pytest.approx(-0.04, abs=0.01)


@pytest.mark.parametrize("scale", [0.9, 1.1])
def test_servo_tolerates_miscalibrated_gain(scale):
    ctx = make_ctx()
    res = ctrl.servo_to(ctx, "cup", scale * diag_lhat(), tol_px=5.0)
    assert res.converged


def test_servo_error_contracts_monotonically_noiseless():
    ctx = make_ctx()
    lhat = diag_lhat()
    target = np.array([320.0, 240.0])
    mon = ctrl.ServoMonitor(s_star=target)
    errs = []
    for _ in range(40):
        _, detections = ctx.detect_frame()
        s = mon.observe(detections, "cup")
        e = ctrl.feedback_error(s, target)
        errs.append(float(np.abs(e).max()))
        ctx.step_velocity(ctrl.control(lhat, e, ctx.speed_limit))
    for a, b in zip(errs, errs[1:]):
        assert b <= a + 1e-9


def test_servo_to_gives_up_after_frame_budget():
    ctx = make_ctx()
    res = ctrl.servo_to(ctx, "cup", np.zeros((6, 2)), tol_px=5.0,
                        max_frames=25)
    assert not res.converged
    assert res.frames == 25


def test_servo_to_missing_class_raises_and_holds_position():
    ctx = make_ctx()
    start = ctx.cam
    with pytest.raises(DetectionMissingError) as err:
        ctrl.servo_to(ctx, "ghost", diag_lhat(), tol_px=5.0, task="Find")
    assert err.value.task == "Find"
    assert wd.pose_delta(start, ctx.cam) == pytest.approx(np.zeros(6))


def test_extract_feature_wrapper():
    mon = ctrl.ServoMonitor(s_star=np.array([320.0, 240.0]))
    s = ctrl.extract_feature(frame([box_at((300.0, 220.0))]), "cup", mon)
    assert s == pytest.approx([300.0, 220.0])
