import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uplam.core import THING_IDS, Pose2D, transform_points, inverse_pose
from uplam.evidential import epistemic_uncertainty, normalized_entropy
from uplam.metrics import calibration_bins
from uplam.simworld import (
    InfeasibleTrajectoryError,
    Miscalibration,
    NoiseSpec,
    RegionCorruption,
    ScenarioConfig,
    WorldConfig,
    body_velocities,
    build_world,
    emitted_confidence,
    generate_scenario,
    render_frame,
    simulate_odometry,
)

PERFECT = dict(stuff_confidence=(1.0, 1e-9), thing_confidence=(1.0, 1e-9))


def _scenario(frames=60, seed=0, **noise):
    cfg = ScenarioConfig(seed=seed, noise=NoiseSpec(**noise))
    cfg.trajectory.frames = frames
    return generate_scenario(cfg)


@pytest.fixture(scope="module")
def clean():
    return _scenario(frames=120, seed=1, **PERFECT)


def _labelled(r):
    a = r.frame.alpha.reshape(-1, r.frame.alpha.shape[-1]).astype(float)
    m = a.sum(axis=1) > 0
    return a, m, r.true_class.reshape(-1)


def test_deterministic_per_seed():
    a, b = _scenario(seed=4), _scenario(seed=4)
    np.testing.assert_array_equal(a.poses, b.poses)
    ra, rb = a.render(7), b.render(7)
    np.testing.assert_array_equal(ra.scan, rb.scan)
    np.testing.assert_array_equal(ra.frame.alpha, rb.frame.alpha)
    np.testing.assert_array_equal(ra.frame.instance, rb.frame.instance)
    c = _scenario(seed=5)
    assert not np.array_equal(c.render(7).frame.alpha, ra.frame.alpha)


def test_zero_noise_argmax_is_truth(clean):
    seen_things = False
    for i in (0, 40, 80, 119):
        a, m, truth = _labelled(clean.render(i))
        assert m.sum() > 1000
        np.testing.assert_array_equal(a[m].argmax(axis=1), truth[m])
        # every labelled ground-truth pixel carries evidence
        assert np.all(m[truth >= 0])
        seen_things |= np.isin(truth, THING_IDS).any()
    assert seen_things


def test_region_flip_wrong_everywhere_in_box():
    sc = _scenario(frames=60, seed=1, region_corruptions=[RegionCorruption(box=(0.0, 0.4, 0.5, 1.0))], **PERFECT)
    r = sc.render(30)
    a, m, truth = _labelled(r)
    h, w = r.true_class.shape
    vv, uu = np.divmod(np.arange(h * w), w)
    inbox = ((uu + 0.5) / w < 0.5) & ((vv + 0.5) / h >= 0.4)
    sel = inbox & m
    assert sel.sum() > 500
    assert np.all(a[sel].argmax(axis=1) != truth[sel])
    np.testing.assert_array_equal(a[m & ~inbox].argmax(axis=1), truth[m & ~inbox])


def test_doubling_temperature_halves_u():
    one, two = _scenario(seed=2), _scenario(seed=2, temperature=2.0)
    r1, r2 = one.render(10), two.render(10)
    u1, u2 = r1.frame.uncertainty, r2.frame.uncertainty
    m = r1.frame.alpha.sum(axis=-1) > 0
    np.testing.assert_allclose(u2[m], u1[m] / 2, rtol=1e-6)
    np.testing.assert_allclose(epistemic_uncertainty(r1.frame.alpha[m].astype(float)), u1[m], rtol=1e-6)


def test_simulate_odometry_std():
    rng = np.random.default_rng(0)
    v = np.tile([2.0, -1.0, 0.0], (100_000, 1))
    noisy = simulate_odometry(v, 0.25, rng)
    assert np.std(noisy[:, 0]) == pytest.approx(0.5, rel=0.02)
    assert np.std(noisy[:, 1]) == pytest.approx(0.25, rel=0.02)
    np.testing.assert_array_equal(noisy[:, 2], 0.0)
    assert np.mean(noisy[:, 0]) == pytest.approx(2.0, abs=0.01)
    np.testing.assert_array_equal(simulate_odometry(v[:5], 0.0, rng), v[:5])


def test_landmark_registry():
    cfg = ScenarioConfig(world=WorldConfig(num_landmarks=5))
    cfg.trajectory.frames = 10
    sc = generate_scenario(cfg)
    assert sorted(sc.truth.landmarks) == [1, 2, 3, 4, 5]
    assert all(lm.class_id in THING_IDS for lm in sc.truth.landmarks.values())
    assert len(sc.truth_map().landmarks) == 5


def test_infeasible_trajectory():
    cfg = ScenarioConfig()
    cfg.trajectory.frames = 10_000
    with pytest.raises(InfeasibleTrajectoryError):
        generate_scenario(cfg)
    with pytest.raises(InfeasibleTrajectoryError):
        generate_scenario(ScenarioConfig(), trajectory=lambda world, dt: np.array([[1e6, 0.0, 0.0]] * 3))


def test_body_velocities_reproduce_poses(clean):
    poses, v, dt = clean.poses, clean.velocities, clean.dt
    p = Pose2D(*poses[0])
    for i, vi in enumerate(v):
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        p = Pose2D.make(p.x + dt * (c * vi[0] - s * vi[1]), p.y + dt * (s * vi[0] + c * vi[1]), p.yaw + dt * vi[2])
        assert p == pytest.approx(tuple(poses[i + 1]), abs=1e-9)
    np.testing.assert_allclose(body_velocities(poses, dt), v)


def test_instance_pixels_inside_projected_landmark(clean):
    cam = clean.camera
    checked = 0
    for i in range(0, 120, 10):
        r = clean.render(i)
        pose = Pose2D(*clean.poses[i])
        for fid, lid in r.instance_ids.items():
            lm = clean.world.landmarks[lid - 1]
            a, b = lm.segment
            corners = np.array([[*a, lm.z], [*b, lm.z], [*a, lm.z + lm.height], [*b, lm.z + lm.height]])
            local = transform_points(corners, inverse_pose(pose))
            local[:, 2] -= clean.config.sensors.lidar_height
            uv, ok = cam.project(local)
            if not ok.all():
                continue
            vv, uu = np.nonzero(r.frame.instance == fid)
            if not len(uu):
                continue
            lo, hi = uv.min(axis=0) - 1, uv.max(axis=0) + 1
            assert np.all((uu >= lo[0]) & (uu <= hi[0]) & (vv >= lo[1]) & (vv <= hi[1]))
            checked += 1
    assert checked > 5


def _independent_samples(mode, seed=0, step=8):
    """One pixel per error patch, so samples do not share a latent accuracy draw."""
    sc = _scenario(frames=300, seed=seed, miscalibration=mode, patch_size=0.1)
    conf, ok, seen = [], [], set()
    for i in range(0, 300, step):
        r = sc.render(i)
        a, _, truth = _labelled(r)
        pid = r.patch.reshape(-1)
        idx = np.flatnonzero(pid >= 0)
        _, first = np.unique(pid[idx], return_index=True)
        idx = np.array([j for j in idx[first] if pid[j] not in seen], dtype=np.int64)
        seen.update(pid[idx].tolist())
        p = a[idx] / a[idx].sum(axis=1, keepdims=True)
        conf.append(1.0 - normalized_entropy(p))
        ok.append(p.argmax(axis=1) == truth[idx])
    return np.concatenate(conf), np.concatenate(ok)


def test_calibrated_curve_near_diagonal():
    conf, ok = _independent_samples("calibrated")
    assert len(conf) >= 100_000
    bins = [b for b in calibration_bins(conf, ok) if b.support >= 1000]
    assert len(bins) >= 5
    for b in bins:
        assert abs(b.accuracy - b.confidence) <= 0.03


def test_overconfident_below_diagonal():
    conf, ok = _independent_samples("overconfident", step=30)
    bins = [b for b in calibration_bins(conf, ok) if not b.empty]
    assert bins
    assert all(b.accuracy < b.confidence for b in bins)


@given(st.floats(0, 1), st.floats(0.05, 1))
def test_emitted_confidence_modes(acc, strength):
    assert emitted_confidence(acc, Miscalibration.CALIBRATED, strength) == acc
    assert emitted_confidence(acc, Miscalibration.OVERCONFIDENT, strength) >= acc - 1e-12
    assert emitted_confidence(acc, Miscalibration.UNDERCONFIDENT, strength) <= acc + 1e-12


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(label_flip_prob=1.5)
    with pytest.raises(ValueError):
        NoiseSpec(temperature=0.0)
    with pytest.raises(ValueError):
        NoiseSpec(region_corruptions=[{"box": (0, 0, 1, 1), "flip_prob": -0.1}])
    assert NoiseSpec(miscalibration="overconfident").miscalibration is Miscalibration.OVERCONFIDENT


def test_config_round_trip():
    cfg = ScenarioConfig(seed=9, noise=NoiseSpec(region_corruptions=[RegionCorruption((0, 0, 1, 1), shift=(1.0, 0.0))]))
    back = ScenarioConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    assert tuple(back.noise.region_corruptions[0].shift) == (1.0, 0.0)


def test_render_frame_wrapper(clean):
    scan, frame = render_frame(clean.world, clean.config.sensors, Pose2D(*clean.poses[3]), clean.config.noise,
                               np.random.default_rng(0), clean.renderer)
    assert scan.shape[1] == 3 and len(scan) > 100
    assert np.all(np.linalg.norm(scan, axis=1) <= clean.config.sensors.max_range)
    assert frame.alpha.shape[:2] == (clean.config.sensors.image_height, clean.config.sensors.image_width)


def test_world_landmarks_inside_extent():
    w = build_world(WorldConfig(num_landmarks=20), seed=3)
    xmin, ymin, xmax, ymax = w.extent
    assert len(w.landmarks) == 20
    assert all(xmin <= lm.x <= xmax and ymin <= lm.y <= ymax for lm in w.landmarks)
