"""Grasp planner tests: rotation scan oracles and execution outcomes."""
import math

import numpy as np
import pytest

from servobot import control as ctrl
from servobot import detector as det
from servobot import grasp as gr
from servobot import kernels
from servobot import world as wd
from servobot.errors import DetectionMissingError

NOISELESS_PARAMS = det.DetectorParams(covered_detect_p=1.0,
                                      covered_jitter_px=0.0,
                                      uncovered_fp_per_frame=0.0)


def hover_ctx(obj, seed=0):
    """Camera centered over the object at the grasp hover clearance."""
    scene = wd.Scene([obj])
    model = det.covered_model([obj.class_label], params=NOISELESS_PARAMS)
    cam = wd.CameraPose(obj.x, obj.y, obj.silhouette_z + gr.HOVER_ABOVE_M)
    return ctrl.RobotContext(scene=scene, model=model,
                             rng=np.random.default_rng(seed), cam=cam)


def box_obj(w, d, yaw=0.0, h=0.1, label="cup", x=0.0, y=0.0):
    return wd.SceneObject(obj_id="t0", class_label=label,
                          shape=wd.BoxShape(width=w, depth=d, height=h),
                          x=x, y=y, yaw=yaw)


def cyl_obj(r, h=0.1, label="cup", x=0.0, y=0.0):
    return wd.SceneObject(obj_id="t0", class_label=label,
                          shape=wd.CylinderShape(radius=r, height=h),
                          x=x, y=y)


def one_sample_scan(width_px, height_px, cam=None, center=(320.0, 240.0)):
    cam = cam or wd.CameraPose(0.0, 0.0, 0.46)
    return gr.RotationScan(samples=[gr.ScanSample(
        yaw=0.0, width_px=width_px, height_px=height_px, center_px=center,
        cam=cam, image_id="img-000000")])


def perfect_plan(obj, depth_error=0.0, point=None, axis=None):
    """Hand-built plan aimed at the object's center and silhouette plane."""
    x, y = point if point is not None else (obj.x, obj.y)
    # Closing along the object's own yaw crosses its width dimension.
    axis = obj.yaw if axis is None else axis
    return gr.GraspPlan(grasp_point=(x, y),
                        grasp_z=obj.silhouette_z + depth_error,
                        depth_m=gr.HOVER_ABOVE_M,
                        yaw=wd.wrap_angle(axis + math.pi / 2.0),
                        closing_axis=axis,
                        aperture_m=0.1,
                        expected_width_m=0.04,
                        image_id="img-000000")


def test_scan_covers_quarter_turn():
    ctx = hover_ctx(box_obj(0.05, 0.05))
    scan = gr.scan_rotation(ctx, "cup")
    assert len(scan.samples) == 18
    yaws = [s.yaw for s in scan.samples]
    assert yaws[0] == 0.0
    assert yaws[-1] == pytest.approx(math.pi / 2.0 - math.pi / 36.0)
    steps = np.diff(yaws)
    assert np.allclose(steps, math.pi / 36.0, atol=1e-12)


def test_square_scan_width_equals_height():
    ctx = hover_ctx(box_obj(0.06, 0.06, yaw=0.3))
    scan = gr.scan_rotation(ctx, "cup")
    for sample in scan.samples:
        assert sample.width_px == pytest.approx(sample.height_px, abs=1.0)


def test_cylinder_scan_is_rotation_invariant():
    ctx = hover_ctx(cyl_obj(0.04))
    scan = gr.scan_rotation(ctx, "cup")
    widths = [s.width_px for s in scan.samples]
    assert max(widths) - min(widths) < 1.0
    heights = [s.height_px for s in scan.samples]
    assert max(heights) - min(heights) < 1.0


def test_scan_symmetry_width_matches_quarter_turned_height():
    obj = box_obj(0.11, 0.04, yaw=0.7)
    ctx = hover_ctx(obj)
    scan = gr.scan_rotation(ctx, "cup", span=math.pi)
    assert len(scan.samples) == 36
    for k in range(18):
        w_here = scan.samples[k].width_px
        h_there = scan.samples[k + 18].height_px
        assert w_here == pytest.approx(h_there, abs=1.0)


def test_scan_detection_loss_raises():
    ctx = hover_ctx(box_obj(0.05, 0.05))
    with pytest.raises(DetectionMissingError) as err:
        gr.scan_rotation(ctx, "ghost")
    assert err.value.task == "Grasp"


def test_scan_validates_arguments():
    ctx = hover_ctx(box_obj(0.05, 0.05))
    with pytest.raises(ValueError):
        gr.scan_rotation(ctx, "cup", resolution=0.0)
    with pytest.raises(ValueError):
        gr.RotationScan().best()


def test_scan_min_extent_matches_fine_brute_force():
    rng = np.random.default_rng(2024)
    resolution = gr.SCAN_RESOLUTION_RAD
    for trial in range(200):
        if rng.random() < 0.5:
            w = rng.uniform(0.02, 0.1)
            d = rng.uniform(0.02, 0.1)
            obj = box_obj(w, d, yaw=rng.uniform(0.0, math.pi))
        else:
            obj = cyl_obj(rng.uniform(0.01, 0.05))
        ctx = hover_ctx(obj, seed=trial)
        scan = gr.scan_rotation(ctx, "cup")
        _, _, coarse_min = scan.best()

        pts = np.ascontiguousarray(obj.outline_points())
        cam = wd.CameraPose(obj.x, obj.y,
                            obj.silhouette_z + gr.HOVER_ABOVE_M)
        fine = np.arange(0.0, math.pi, resolution / 10.0)
        ext = kernels.yaw_sweep_extents(pts, cam.x, cam.y, cam.z, fine,
                                        525.0)
        u = ext[:, 0]
        fine_min = float(u.min())
        theta_star = float(fine[int(u.argmin())])
        # The coarse grid has a sample within half a step of the optimum;
        # the chosen extent cannot beat the truth or exceed the local bound.
        gap = np.minimum(np.abs(fine - theta_star),
                         math.pi - np.abs(fine - theta_star))
        local_max = float(u[gap <= resolution / 2.0 + 1e-9].max())
        assert coarse_min >= fine_min - 1e-6
        assert coarse_min <= local_max + 1e-6


def test_select_grasp_pixel_to_meter_oracle():
    scan = one_sample_scan(40.0, 100.0)
    plan = gr.select_grasp(scan, 0.3, wd.CameraIntrinsics())
    assert plan.expected_width_m == pytest.approx(40.0 * 0.3 / 525.0,
                                                  rel=1e-12)
    assert plan.grasp_point == pytest.approx((0.0, 0.0), abs=1e-12)
    assert plan.grasp_z == pytest.approx(0.16, abs=1e-12)
    assert plan.depth_m == 0.3
    # Width was minimal: closing axis along the camera x axis.
    assert plan.closing_axis == pytest.approx(0.0, abs=1e-12)
    assert plan.yaw == pytest.approx(math.pi / 2.0, abs=1e-12)
    assert plan.aperture_m == pytest.approx(plan.expected_width_m + 0.02,
                                            abs=1e-12)


def test_select_grasp_aperture_caps_at_gripper():
    scan = one_sample_scan(220.0, 300.0)
    plan = gr.select_grasp(scan, 0.3, wd.CameraIntrinsics())
    assert plan.expected_width_m == pytest.approx(220.0 * 0.3 / 525.0,
                                                  rel=1e-12)
    assert plan.aperture_m == gr.GRIPPER_MAX_WIDTH_M


def test_select_grasp_too_wide_raises():
    scan = one_sample_scan(240.0, 300.0)  # 0.137 m at 0.3 m depth
    with pytest.raises(gr.ObjectTooWideError) as err:
        gr.select_grasp(scan, 0.3, wd.CameraIntrinsics())
    assert err.value.expected_width_m > 0.135


def test_select_grasp_tie_breaks_width_then_lowest_yaw():
    cam = wd.CameraPose(0.0, 0.0, 0.46)
    samples = [
        gr.ScanSample(yaw=0.0, width_px=50.0, height_px=50.0,
                      center_px=(320.0, 240.0), cam=cam,
                      image_id="img-000000"),
        gr.ScanSample(yaw=0.1, width_px=50.0, height_px=60.0,
                      center_px=(320.0, 240.0), cam=cam.moved(dyaw=0.1),
                      image_id="img-000001"),
    ]
    scan = gr.RotationScan(samples=samples)
    sample, dim, extent = scan.best()
    assert sample.yaw == 0.0
    assert dim == "width"
    assert extent == 50.0


def test_select_grasp_height_dimension_turns_closing_axis():
    cam = wd.CameraPose(0.0, 0.0, 0.46, yaw=0.4)
    scan = gr.RotationScan(samples=[gr.ScanSample(
        yaw=0.4, width_px=120.0, height_px=45.0, center_px=(320.0, 240.0),
        cam=cam, image_id="img-000000")])
    plan = gr.select_grasp(scan, 0.16, wd.CameraIntrinsics())
    assert plan.closing_axis == pytest.approx(0.4 - math.pi / 2.0, abs=1e-12)


def test_select_grasp_back_projects_off_center_boxes():
    cam = wd.CameraPose(0.0, 0.0, 0.46)
    scan = gr.RotationScan(samples=[gr.ScanSample(
        yaw=0.0, width_px=40.0, height_px=40.0,
        center_px=(320.0 + 52.5, 240.0), cam=cam, image_id="img-000000")])
    plan = gr.select_grasp(scan, 0.3, wd.CameraIntrinsics())
    assert plan.grasp_point[0] == pytest.approx(0.03, abs=1e-12)
    assert plan.grasp_point[1] == pytest.approx(0.0, abs=1e-12)


def test_execute_perfect_grasp_succeeds_and_attaches():
    obj = box_obj(0.04, 0.08)
    scene = wd.Scene([obj])
    result = gr.execute_grasp(scene, perfect_plan(obj))
    assert result.kind is gr.GraspOutcomeKind.SUCCESS
    assert result.success
    assert result.object_id == "t0"
    assert result.extent_m == pytest.approx(0.04, abs=1e-12)
    assert result.obj is obj
    assert "t0" not in [o.obj_id for o in scene.objects]


def test_execute_off_footprint_misses():
    obj = box_obj(0.04, 0.04)
    scene = wd.Scene([obj])
    result = gr.execute_grasp(scene, perfect_plan(obj, point=(0.08, 0.0)))
    assert result.kind is gr.GraspOutcomeKind.MISS
    assert result.object_id is None
    assert len(scene.objects) == 1


def test_execute_depth_error_beyond_slip_drops():
    obj = box_obj(0.04, 0.08, h=0.12)
    scene = wd.Scene([obj])
    result = gr.execute_grasp(scene, perfect_plan(obj, depth_error=0.05))
    assert result.kind is gr.GraspOutcomeKind.DROP
    assert result.depth_error_m == pytest.approx(0.05)
    assert len(scene.objects) == 1


def test_execute_depth_error_beyond_half_height_misses():
    obj = box_obj(0.04, 0.08, h=0.12)
    scene = wd.Scene([obj])
    result = gr.execute_grasp(scene, perfect_plan(obj, depth_error=0.07))
    assert result.kind is gr.GraspOutcomeKind.MISS


def test_execute_small_depth_error_still_succeeds():
    obj = box_obj(0.04, 0.08, h=0.12)
    scene = wd.Scene([obj])
    result = gr.execute_grasp(scene, perfect_plan(obj, depth_error=0.02))
    assert result.kind is gr.GraspOutcomeKind.SUCCESS


def test_execute_never_succeeds_beyond_gripper_width():
    rng = np.random.default_rng(5)
    for _ in range(100):
        w = rng.uniform(0.136, 0.4)
        d = rng.uniform(0.02, 0.4)
        yaw = rng.uniform(0.0, math.pi)
        obj = box_obj(w, d, yaw=yaw)
        axis = yaw if d > gr.GRIPPER_MAX_WIDTH_M else yaw + 0.0
        scene = wd.Scene([obj])
        result = gr.execute_grasp(scene, perfect_plan(obj, axis=axis))
        extent = obj.extent_along(axis)
        if extent > gr.GRIPPER_MAX_WIDTH_M:
            assert result.kind is gr.GraspOutcomeKind.MISS


def test_execute_respects_minimum_finger_gap():
    obj = box_obj(0.008, 0.05)
    scene = wd.Scene([obj])
    gripper = gr.Gripper(min_width_m=0.01)
    result = gr.execute_grasp(scene, perfect_plan(obj), gripper)
    assert result.kind is gr.GraspOutcomeKind.MISS


def test_execute_heavy_object_drops():
    obj = box_obj(0.04, 0.08)
    obj.mass_ok = False
    scene = wd.Scene([obj])
    result = gr.execute_grasp(scene, perfect_plan(obj))
    assert result.kind is gr.GraspOutcomeKind.DROP


def test_execute_targets_topmost_stacked_object():
    base = wd.SceneObject(obj_id="base", class_label="plate",
                          shape=wd.BoxShape(0.2, 0.2, 0.02), x=0.0, y=0.0)
    top = wd.SceneObject(obj_id="top", class_label="cup",
                         shape=wd.BoxShape(0.04, 0.04, 0.06), x=0.0, y=0.0,
                         support_z=0.02)
    scene = wd.Scene([base, top])
    result = gr.execute_grasp(scene, perfect_plan(top, axis=0.0))
    assert result.object_id == "top"
    assert result.kind is gr.GraspOutcomeKind.SUCCESS


def test_run_grasp_task_noiseless_end_to_end():
    obj = box_obj(0.05, 0.03, yaw=0.4, x=0.02, y=-0.03)
    scene = wd.Scene([obj])
    model = det.covered_model(["cup"], params=NOISELESS_PARAMS)
    cam = wd.CameraPose(0.0, 0.0, obj.top_z + 0.315)
    ctx = ctrl.RobotContext(scene=scene, model=model,
                            rng=np.random.default_rng(0), cam=cam)
    lhat = np.zeros((6, 2))
    lhat[0, 0] = -0.315 / 525.0
    lhat[1, 1] = 0.315 / 525.0
    plan, result = gr.run_grasp_task(ctx, "cup", lhat,
                                     estimated_depth_m=0.315)
    assert result.kind is gr.GraspOutcomeKind.SUCCESS
    assert ctx.cam.z == pytest.approx(obj.top_z + 0.16, abs=1e-9)
    # The chosen closing direction crosses the 0.03 m side of the box.
    narrow_axis = (obj.yaw + math.pi / 2.0) % math.pi
    off = abs((plan.closing_axis - narrow_axis + math.pi / 2.0) % math.pi
              - math.pi / 2.0)
    assert off <= gr.SCAN_RESOLUTION_RAD / 2.0 + 1e-9
    assert plan.expected_width_m == pytest.approx(0.03, rel=0.12)
    assert result.extent_m == pytest.approx(
        obj.extent_along(plan.closing_axis), abs=1e-12)


def test_run_grasp_task_detection_loss_propagates():
    obj = box_obj(0.05, 0.03)
    scene = wd.Scene([obj])
    model = det.covered_model(["cup"], params=NOISELESS_PARAMS)
    cam = wd.CameraPose(0.0, 0.0, obj.top_z + 0.16)
    ctx = ctrl.RobotContext(scene=scene, model=model,
                            rng=np.random.default_rng(0), cam=cam)
    with pytest.raises(DetectionMissingError) as err:
        gr.run_grasp_task(ctx, "ghost", np.zeros((6, 2)),
                          estimated_depth_m=0.16)
    assert err.value.task == "Grasp"
