"""Jacobian estimation tests: rank-1 update oracles, learning sessions."""
import numpy as np
import pytest

from servobot import jacobian as jac


def planar_pj(matrix=None, alpha=0.5):
    return jac.PseudoJacobian(
        matrix=np.zeros((6, 2)) if matrix is None else matrix,
        formulation="masked", alpha=alpha, mask=jac.planar_mask())


def full_pj(matrix, formulation="broyden_bad", alpha=1.0):
    return jac.PseudoJacobian(matrix=matrix, formulation=formulation,
                              alpha=alpha, mask=jac.full_mask())


def rand_state(rng, scale=1e-3):
    m = rng.normal(0.0, scale, (6, 2))
    dx = rng.normal(0.0, 0.03, 6)
    de = rng.uniform(5.0, 100.0, 2) * rng.choice([-1.0, 1.0], 2)
    return m, dx, de


def test_masked_update_hand_oracle():
    dx = np.array([0.027, 0.0, 0.0, 0.0, 0.0, 0.0])
    de = np.array([-45.0, 0.0])
    pj1 = jac.update_masked(planar_pj(), dx, de)
    # 0.5 * 0.027 * (-45) / 45^2
    assert pj1.matrix[0, 0] == pytest.approx(-3.0e-4, rel=1e-12)
    pj2 = jac.update_masked(pj1, dx, de)
    # Residual halves: the entry moves halfway to the -6e-4 secant value.
    assert pj2.matrix[0, 0] == pytest.approx(-4.5e-4, rel=1e-12)
    assert pj2.updates_applied == 2


def test_zero_residual_is_a_fixed_point_for_all_rules():
    rng = np.random.default_rng(12)
    for _ in range(20):
        m, _, de = rand_state(rng)
        dx = m @ de
        for name, form in jac.FORMULATIONS.items():
            pj = jac.PseudoJacobian(matrix=m, formulation=name,
                                    alpha=form.alpha,
                                    mask=(jac.planar_mask() if form.masked
                                          else jac.full_mask()))
            out = form.update(pj, dx, de)
            assert np.array_equal(out.matrix, m), name


def test_masked_update_never_touches_masked_entries():
    rng = np.random.default_rng(7)
    keep = ~jac.planar_mask()
    for _ in range(50):
        m, dx, de = rand_state(rng)
        pj = planar_pj(matrix=m.copy())
        out = jac.update_masked(pj, dx, de)
        assert out.matrix[keep].tobytes() == m[keep].tobytes()
        assert (out.matrix[~keep] != m[~keep]).any()


def test_masked_with_unit_gain_full_mask_equals_broyden_bad():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m, dx, de = rand_state(rng)
        a = jac.update_masked(full_pj(m.copy(), "masked", alpha=1.0), dx, de)
        b = jac.update_broyden_bad(full_pj(m.copy()), dx, de)
        assert a.matrix.tobytes() == b.matrix.tobytes()


def test_secant_identity_after_full_update():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        m, dx, de = rand_state(rng)
        out = jac.update_broyden_bad(full_pj(m), dx, de)
        err = np.abs(out.matrix @ de - dx)
        scale = max(1.0, float(np.abs(dx).max()))
        worst = max(worst, float(err.max()) / scale)
    assert worst <= 1e-12


def test_transposed_denominator_rules_raise_from_zero_state():
    dx = np.array([0.027, 0.0, 0.0, 0.0, 0.0, 0.0])
    de = np.array([-45.0, 0.0])
    for name in ("vosvs", "broyden_good"):
        pj = jac.FORMULATIONS[name].initial("zeros")
        with pytest.raises(jac.DegenerateUpdateError):
            jac.FORMULATIONS[name].update(pj, dx, de)


def test_seeded_diagonal_motion_cancels_denominator():
    # The positive-diagonal seed maps a perfectly antisymmetric (dx, de)
    # pair to a zero denominator, so an exactly noiseless diagonal motion
    # is degenerate for the transposed-denominator rules.
    dx = np.array([0.027, 0.027, 0.0, 0.0, 0.0, 0.0])
    de = np.array([-45.0, 45.0])
    pj = jac.FORMULATIONS["vosvs"].initial("seed")
    with pytest.raises(jac.DegenerateUpdateError):
        jac.update_vosvs(pj, dx, de)


def test_update_validates_shapes():
    pj = planar_pj()
    with pytest.raises(ValueError):
        jac.update_masked(pj, np.zeros(5), np.zeros(2))
    with pytest.raises(ValueError):
        jac.update_masked(pj, np.zeros(6), np.zeros(3))
    with pytest.raises(ValueError):
        jac.PseudoJacobian(matrix=np.zeros((2, 6)))


def test_convergence_criterion_is_strictly_below():
    a = planar_pj()
    m = np.zeros((6, 2))
    m[0, 0] = 1e-6
    assert not jac.has_converged(a, planar_pj(matrix=m))
    m2 = np.zeros((6, 2))
    m2[0, 0] = 1e-7
    m2[1, 1] = 1e-7
    assert jac.has_converged(a, planar_pj(matrix=m2))


def test_alpha_controls_contraction_rate():
    # Repeating one (dx, de) pair leaves residual (1 - alpha)^k.
    dx = np.array([0.03, 0.0, 0.0, 0.0, 0.0, 0.0])
    de = np.array([-50.0, 0.0])
    pj = planar_pj(alpha=0.5)
    vals = []
    for _ in range(6):
        pj = jac.update_masked(pj, dx, de)
        vals.append(pj.matrix[0, 0])
    target = dx[0] / de[0]
    resid = [abs(v - target) for v in vals]
    ratios = [b / a for a, b in zip(resid, resid[1:])]
    assert np.allclose(ratios, 0.5, atol=1e-9)


def test_formulation_registry_configuration():
    assert set(jac.FORMULATIONS) == {"masked", "vosvs", "broyden_bad",
                                     "broyden_good"}
    f = jac.FORMULATIONS
    assert f["masked"].alpha == 0.5 and f["masked"].masked
    assert not f["masked"].seeded and not f["masked"].transpose_denominator
    assert f["vosvs"].alpha == 1.0 and f["vosvs"].masked
    assert f["vosvs"].seeded and f["vosvs"].transpose_denominator
    assert not f["broyden_bad"].masked and not f["broyden_bad"].seeded
    assert f["broyden_good"].transpose_denominator
    assert f["broyden_good"].seeded and not f["broyden_good"].masked


def test_initial_states():
    z = jac.FORMULATIONS["broyden_bad"].initial()
    assert not z.matrix.any()
    s = jac.FORMULATIONS["vosvs"].initial()
    assert s.matrix[0, 0] == jac.SEED_SCALE
    assert s.matrix[1, 1] == jac.SEED_SCALE
    assert np.count_nonzero(s.matrix) == 2
    with pytest.raises(ValueError):
        jac.FORMULATIONS["masked"].initial("garbage")


def test_noiseless_masked_session_matches_analytic_jacobian():
    rng = np.random.default_rng(0)
    session = jac.run_learning_trial("masked", jac.NOISELESS, rng)
    assert session.converged
    assert session.updates_used == 20
    scale = jac.LEARNING_WORKING_DEPTH / 525.0
    assert session.final.matrix[0, 0] == pytest.approx(-scale, rel=5e-3)
    assert session.final.matrix[1, 1] == pytest.approx(scale, rel=5e-3)
    keep = ~jac.planar_mask()
    assert not session.final.matrix[keep].any()
    assert session.robot_seconds > 0.0


def test_noiseless_seeded_rules_hit_the_degeneracy():
    # Without detection jitter the first diagonal motion produces the exact
    # antisymmetric pair that zeroes the transposed denominator.
    for name in ("vosvs", "broyden_good"):
        rng = np.random.default_rng(0)
        with pytest.raises(jac.DegenerateUpdateError):
            jac.run_learning_trial(name, jac.NOISELESS, rng)


def test_session_skips_updates_when_image_barely_moves():
    # A tiny commanded motion moves the feature less than the de gate.
    config = jac.SessionConfig(max_updates=6)
    scene, pose, label = jac.standard_learning_setup()
    model = jac.covered_learning_model(scene, pose, label,
                                       jac.NOISELESS.detector_params())
    rng = np.random.default_rng(1)
    session = jac.learn_session(scene, label, model, "masked", rng, pose,
                                config=config)
    gated = [e for e in session.entries if e.skipped]
    for entry in gated:
        assert entry.skip_reason
    assert session.updates_used + session.skipped_updates == \
        len(session.entries)


def test_learning_trial_determinism():
    runs = []
    for _ in range(2):
        rng = np.random.default_rng([17, 0])
        session = jac.run_learning_trial("masked", jac.DEFAULT_COMPARE_NOISE,
                                         rng)
        runs.append(session)
    assert runs[0].final.matrix.tobytes() == runs[1].final.matrix.tobytes()
    assert runs[0].updates_used == runs[1].updates_used
    assert runs[0].robot_seconds == runs[1].robot_seconds


@pytest.fixture(scope="module")
def comparison_report():
    return jac.compare_formulations(10, jac.DEFAULT_COMPARE_NOISE,
                                    jac.DEFAULT_COMPARE_SEED)


def test_comparison_masked_cross_terms_stay_zero(comparison_report):
    stats = comparison_report.stats_for("masked")
    assert stats.cross_range == (0.0, 0.0)
    assert stats.trials == 10
    assert stats.converged == 10


def test_comparison_mean_update_ordering(comparison_report):
    means = [comparison_report.stats_for(n).mean_updates
             for n in ("masked", "vosvs", "broyden_bad", "broyden_good")]
    assert means[0] <= means[1] <= means[2] <= means[3]


def test_comparison_masked_beats_unmasked_on_active_ranges(comparison_report):
    masked = comparison_report.stats_for("masked")
    lo, hi = masked.dx_dsx_range
    scale = jac.LEARNING_WORKING_DEPTH / 525.0
    assert lo < 0.0 < -lo  # negative gain on the x entry
    assert abs((lo + hi) / 2.0 + scale) < 0.2 * scale


def test_comparison_report_json_shape(comparison_report):
    data = comparison_report.to_json()
    assert data["trials"] == 10
    assert data["seed"] == jac.DEFAULT_COMPARE_SEED
    names = [row["formulation"] for row in data["formulations"]]
    assert names == ["masked", "vosvs", "broyden_bad", "broyden_good"]


def test_standard_learning_setup_geometry():
    scene, pose, label = jac.standard_learning_setup()
    assert label in scene.class_vocabulary()
    depth = jac.learning_target_depth(scene, pose, label)
    assert depth == pytest.approx(jac.LEARNING_WORKING_DEPTH, abs=1e-12)


def test_noise_config_json_round_trip():
    cfg = jac.NoiseConfig(detection_jitter_px=1.5, detect_p=0.99)
    data = cfg.to_json()
    assert data["detection_jitter_px"] == 1.5
    params = cfg.detector_params()
    assert params.uncovered_fp_per_frame == 0.0
    assert params.covered_jitter_px == 1.5
