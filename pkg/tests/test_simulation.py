import numpy as np
import pytest
from scipy.stats import chi

from slvba.factors import EpipolarFactor, epipolar_residual
from slvba.geometry import CameraIntrinsics, skew
from slvba.preintegration import imu_residual
from slvba.simulation import (
    PerturbationSpec,
    SceneSpec,
    SimulationConfig,
    Trajectory,
    TrajectorySpec,
    default_extrinsics,
    generate_ground_truth,
    perturb_states,
    simulate,
    synthesize_imu,
    synthesize_tracks,
)

from conftest import preints_for


def test_circle_has_constant_speed():
    traj = Trajectory(TrajectorySpec(family="circle", amplitude=1.0, angular_rate=1.0))
    _, v, _, _, _ = traj.sample(np.linspace(0, 6, 500))
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)


def test_static_imu_reads_gravity_reaction():
    imu = synthesize_imu(Trajectory(TrajectorySpec(family="static")))
    np.testing.assert_allclose(imu.accel, np.tile([0, 0, 9.81], (len(imu), 1)), atol=1e-12)
    np.testing.assert_array_equal(imu.gyro, 0.0)


@pytest.mark.parametrize("family", ["sinusoid-3d", "circle", "figure-eight"])
def test_velocity_and_rate_are_exact_derivatives(family):
    traj = Trajectory(TrajectorySpec(family=family))
    t = np.linspace(0.1, 4.4, 40)
    h = 1e-5
    p_plus, _, _, R_plus, _ = traj.sample(t + h)
    p_minus, _, _, R_minus, _ = traj.sample(t - h)
    _, v, a, R, omega = traj.sample(t)
    assert np.abs((p_plus - p_minus) / (2 * h) - v).max() < 1e-6
    _, v_plus, _, _, _ = traj.sample(t + h)
    _, v_minus, _, _, _ = traj.sample(t - h)
    assert np.abs((v_plus - v_minus) / (2 * h) - a).max() < 1e-6
    for k in range(len(t)):
        dR = (R_plus[k] - R_minus[k]) / (2 * h)
        np.testing.assert_allclose(R[k].T @ dR, skew(omega[k]), atol=1e-6)


def test_trajectory_spec_validation():
    with pytest.raises(ValueError):
        TrajectorySpec(family="helix")
    with pytest.raises(ValueError):
        TrajectorySpec(imu_rate=10.0, keyframe_rate=2.0)
    with pytest.raises(ValueError):
        TrajectorySpec(amplitude=2.0, angular_rate=1.0, forward_speed=1.0)
    with pytest.raises(ValueError):
        SceneSpec(n_landmarks=0)
    with pytest.raises(ValueError):
        PerturbationSpec(position_sigma=-1.0)


def test_keyframe_window_defaults():
    states, _ = generate_ground_truth(TrajectorySpec())
    assert len(states) == 10
    assert np.all(np.diff([s.t_ns for s in states]) == 500_000_000)


def test_ground_truth_satisfies_imu_factors(noiseless_bundle):
    truth = noiseless_bundle.groundtruth
    for p, si, sj in zip(preints_for(noiseless_bundle, truth), truth[:-1], truth[1:]):
        r, _, _ = imu_residual(p, si, sj, jacobians=False)
        assert np.abs(r).max() < 1e-6


def test_ground_truth_tracks_analytic_trajectory(noiseless_bundle):
    traj = Trajectory(TrajectorySpec())
    # integrated states carry second-order drift of the midpoint rule
    for s in noiseless_bundle.groundtruth:
        assert np.linalg.norm(s.p - traj.state_at(s.t_ns).p) < 1e-3


def test_noiseless_tracks_are_coplanar(noiseless_bundle):
    truth = noiseless_bundle.groundtruth
    ext = noiseless_bundle.calib.extrinsics
    worst = 0.0
    for track in noiseless_bundle.tracks:
        obs = track.observations
        for a, b in zip(obs[:-1], obs[1:]):
            f = EpipolarFactor(a.keyframe, b.keyframe, a.bearing, b.bearing, 1.0)
            r, _, _ = epipolar_residual(truth[a.keyframe], truth[b.keyframe], f, ext)
            worst = max(worst, abs(r))
    assert worst < 1e-12


def test_observations_are_in_front_of_cameras(noisy_bundle):
    truth = noisy_bundle.groundtruth
    ext = noisy_bundle.calib.extrinsics
    for track in noisy_bundle.tracks:
        X = noisy_bundle.landmarks[track.feature_id]
        for o in track.observations:
            s = truth[o.keyframe]
            pc = ext.R.T @ (s.R.T @ (X - s.p) - ext.translation)
            assert pc[2] > 0


def test_landmark_behind_a_camera_is_not_observed():
    states, _ = generate_ground_truth(TrajectorySpec())
    ext = default_extrinsics()
    intr = CameraIntrinsics.euroc()
    s0 = states[0]
    cam_R = s0.R @ ext.R
    cam_p = s0.p + s0.R @ ext.translation
    ahead = cam_p + 5.0 * cam_R[:, 2]
    behind = cam_p - 5.0 * cam_R[:, 2]
    tracks, _ = synthesize_tracks(states, SceneSpec(), intr, ext,
                                  landmarks=np.stack([ahead, behind]))
    seen_at_first = {t.feature_id for t in tracks if 0 in t.keyframes}
    assert seen_at_first == {0}


def bearing_noise_std(intr):
    scene = SceneSpec(n_landmarks=50, min_views=10)
    base = dict(imu_noise=False, scene=scene, intrinsics=intr, perturbation=None, seed=0)
    clean = simulate(SimulationConfig(pixel_sigma=0.0, **base))
    noisy = simulate(SimulationConfig(pixel_sigma=1.0, **base))
    diffs = []
    for a, b in zip(clean.tracks, noisy.tracks):
        assert a.feature_id == b.feature_id
        for oa, ob in zip(a.observations, b.observations):
            diffs.append(ob.bearing[:2] - oa.bearing[:2])
    return np.std(diffs)


def test_pixel_noise_maps_to_bearing_noise():
    e = CameraIntrinsics.euroc()
    pinhole = CameraIntrinsics(458.0, 458.0, e.cx, e.cy)
    assert abs(bearing_noise_std(pinhole) * 458.0 - 1.0) < 0.1


def test_barrel_distortion_inflates_bearing_noise():
    assert bearing_noise_std(CameraIntrinsics.euroc()) * 458.0 > 1.1


def test_zero_perturbation_returns_identical_states(noiseless_bundle):
    truth = noiseless_bundle.groundtruth
    zero = PerturbationSpec(0.0, 0.0, 0.0, 0.0, 0.0)
    for a, b in zip(perturb_states(truth, zero), truth):
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())


def test_position_perturbation_norm_follows_chi_distribution():
    states, _ = generate_ground_truth(TrajectorySpec(n_keyframes=1000, keyframe_rate=200.0,
                                                     imu_rate=2000.0))
    out = perturb_states(states, PerturbationSpec(position_sigma=0.05, seed=3))
    norms = [np.linalg.norm(a.p - b.p) for a, b in zip(out, states)]
    expected = 0.05 * chi(3).mean()
    assert abs(np.mean(norms) / expected - 1.0) < 0.05


def test_perturbation_is_deterministic(noiseless_bundle):
    truth = noiseless_bundle.groundtruth
    a = perturb_states(truth, PerturbationSpec(seed=8))
    b = perturb_states(truth, PerturbationSpec(seed=8))
    c = perturb_states(truth, PerturbationSpec(seed=9))
    assert all(np.array_equal(x.to_vector(), y.to_vector()) for x, y in zip(a, b))
    assert not np.array_equal(a[0].to_vector(), c[0].to_vector())


def test_same_seed_reproduces_dataset():
    cfg = SimulationConfig(scene=SceneSpec(n_landmarks=20), seed=5)
    a, b = simulate(cfg), simulate(cfg)
    assert a.imu == b.imu
    assert len(a.tracks) == len(b.tracks)
    for ta, tb in zip(a.tracks, b.tracks):
        for oa, ob in zip(ta.observations, tb.observations):
            assert oa.keyframe == ob.keyframe
            np.testing.assert_array_equal(oa.uv, ob.uv)
    for sa, sb in zip(a.initial, b.initial):
        np.testing.assert_array_equal(sa.to_vector(), sb.to_vector())
    c = simulate(SimulationConfig(scene=SceneSpec(n_landmarks=20), seed=6))
    assert not a.imu == c.imu


def test_imu_noise_has_requested_density():
    spec = TrajectorySpec(family="static", n_keyframes=41)
    cfg = SimulationConfig().noise
    imu = synthesize_imu(Trajectory(spec), cfg, seed=0)
    dt = 1.0 / spec.imu_rate
    assert abs(imu.gyro.std() * np.sqrt(dt) / cfg.gyro_noise - 1) < 0.05
    assert abs((imu.accel - [0, 0, 9.81]).std() * np.sqrt(dt) / cfg.accel_noise - 1) < 0.05


def test_requested_views_are_met(noisy_bundle):
    assert len(noisy_bundle.tracks) == 50
    assert all(len(t) == 10 for t in noisy_bundle.tracks)


def test_impossible_scene_is_reported():
    cfg = SimulationConfig(scene=SceneSpec(n_landmarks=5, box_min=(100, 100, 100),
                                           box_max=(101, 101, 101), min_views=2))
    with pytest.raises(ValueError, match="could only place"):
        simulate(cfg)
