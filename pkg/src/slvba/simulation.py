"""Synthetic visual-inertial windows with exact ground truth.

Trajectories are analytic, so velocity, acceleration and body rates are
exact derivatives.  Ground-truth keyframe states are obtained by integrating
the noiseless synthesized IMU stream with the same midpoint scheme used for
preintegration; the IMU residual is therefore zero at ground truth up to
round-off, and feature tracks are generated from those same states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factors import FeatureTrack, Observation
from .geometry import (
    CameraIntrinsics,
    Extrinsics,
    gravity_vector,
    quat_boxplus,
    rot_to_quat,
    rot_x,
    rot_y,
    rot_z,
)
from .preintegration import ImuMeasurements, ImuNoiseModel, preintegrate, propagate_state
from .state import KeyframeState

FAMILIES = ("sinusoid-3d", "circle", "figure-eight", "static")


@dataclass(frozen=True)
class TrajectorySpec:
    family: str = "sinusoid-3d"
    amplitude: float = 0.4          # m (circle radius for "circle")
    angular_rate: float = 1.2       # rad/s
    forward_speed: float = 1.0      # m/s, sinusoid-3d only
    roll_amplitude: float = 0.15    # rad
    pitch_amplitude: float = 0.10   # rad
    n_keyframes: int = 10
    keyframe_rate: float = 2.0      # Hz
    imu_rate: float = 200.0         # Hz
    imu_margin: float = 0.05        # s of IMU data outside the keyframe span
    start_ns: int = 1_000_000_000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown trajectory family {self.family!r}")
        if self.imu_rate < 10.0 * self.keyframe_rate:
            raise ValueError("IMU rate must be at least 10x the keyframe rate")
        if self.n_keyframes < 2:
            raise ValueError("need at least two keyframes")
        if self.family == "sinusoid-3d" and self.forward_speed <= self.amplitude * self.angular_rate:
            raise ValueError("forward speed must exceed amplitude * angular rate "
                             "so the heading never reverses")
        if self.start_ns < self.imu_margin * 1e9:
            raise ValueError("start_ns must leave room for the IMU margin")

    @property
    def duration(self) -> float:
        return (self.n_keyframes - 1) / self.keyframe_rate

    def keyframe_times_ns(self):
        period = int(round(1e9 / self.keyframe_rate))
        return self.start_ns + period * np.arange(self.n_keyframes, dtype=np.int64)

    def imu_times_ns(self):
        period = int(round(1e9 / self.imu_rate))
        margin = int(round(self.imu_margin * 1e9))
        kf = self.keyframe_times_ns()
        n_before = -(-margin // period)
        first = kf[0] - n_before * period
        last = kf[-1] + margin
        return np.arange(first, last + 1, period, dtype=np.int64)


@dataclass(frozen=True)
class SceneSpec:
    n_landmarks: int = 120
    box_min: tuple | None = None    # m, global frame; None derives a box from the path
    box_max: tuple | None = None
    min_depth: float = 2.0
    max_depth: float = 12.0
    min_views: int = 2

    def __post_init__(self):
        if self.n_landmarks <= 0:
            raise ValueError("landmark count must be positive")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


@dataclass(frozen=True)
class PerturbationSpec:
    position_sigma: float = 0.05
    orientation_sigma: float = np.deg2rad(2.0)
    velocity_sigma: float = 0.1
    accel_bias_sigma: float = 0.01
    gyro_bias_sigma: float = 0.001
    seed: int = 0

    def __post_init__(self):
        for name in ("position_sigma", "orientation_sigma", "velocity_sigma",
                     "accel_bias_sigma", "gyro_bias_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def default_extrinsics() -> Extrinsics:
    """Forward-looking camera: optical axis along body x, image y along body -z."""
    R_ic = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return Extrinsics(rot_to_quat(R_ic), np.array([0.05, -0.02, 0.01]))


class Trajectory:
    """Analytic pose/velocity/acceleration sampler for one :class:`TrajectorySpec`.

    Times passed to :meth:`sample` are seconds relative to ``spec.start_ns``.
    """

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec

    def _kinematics(self, t):
        s = self.spec
        A, w = s.amplitude, s.angular_rate
        z = np.zeros_like(t)
        if s.family == "sinusoid-3d":
            v0 = s.forward_speed
            ph = (w * t, 1.3 * w * t + 0.7, 0.9 * w * t + 1.1)
            f = (1.0, 1.3, 0.9)
            amp = (A, A, 0.6 * A)
            p = np.stack([amp[k] * np.sin(ph[k]) for k in range(3)], axis=-1)
            p[..., 0] += v0 * t
            v = np.stack([amp[k] * f[k] * w * np.cos(ph[k]) for k in range(3)], axis=-1)
            v[..., 0] += v0
            a = np.stack([-amp[k] * (f[k] * w) ** 2 * np.sin(ph[k]) for k in range(3)], axis=-1)
        elif s.family == "circle":
            p = np.stack([A * np.cos(w * t), A * np.sin(w * t), z], axis=-1)
            v = np.stack([-A * w * np.sin(w * t), A * w * np.cos(w * t), z], axis=-1)
            a = np.stack([-A * w * w * np.cos(w * t), -A * w * w * np.sin(w * t), z], axis=-1)
        elif s.family == "figure-eight":
            p = np.stack([A * np.sin(w * t), 0.5 * A * np.sin(2 * w * t), z], axis=-1)
            v = np.stack([A * w * np.cos(w * t), A * w * np.cos(2 * w * t), z], axis=-1)
            a = np.stack([-A * w * w * np.sin(w * t), -2 * A * w * w * np.sin(2 * w * t), z],
                         axis=-1)
        else:
            p = v = a = np.zeros(t.shape + (3,))
        return p, v, a

    def _attitude(self, t, v, a):
        """ZYX Euler angles and their rates."""
        s = self.spec
        if s.family == "static":
            zero = np.zeros_like(t)
            return (zero,) * 6
        vx, vy, ax, ay = v[..., 0], v[..., 1], a[..., 0], a[..., 1]
        yaw = np.arctan2(vy, vx)
        dyaw = (vx * ay - vy * ax) / (vx * vx + vy * vy)
        if s.family == "circle":
            zero = np.zeros_like(t)
            return yaw, dyaw, zero, zero, zero, zero
        w = s.angular_rate
        roll = s.roll_amplitude * np.sin(1.1 * w * t)
        droll = s.roll_amplitude * 1.1 * w * np.cos(1.1 * w * t)
        pitch = s.pitch_amplitude * np.sin(0.8 * w * t + 0.3)
        dpitch = s.pitch_amplitude * 0.8 * w * np.cos(0.8 * w * t + 0.3)
        return yaw, dyaw, pitch, dpitch, roll, droll

    def sample(self, t):
        """``(p, v, a, R, omega_body)`` at times ``t`` (scalar or array)."""
        t = np.asarray(t, dtype=float)
        p, v, a = self._kinematics(t)
        yaw, dyaw, pitch, dpitch, roll, droll = self._attitude(t, v, a)
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        R = np.empty(t.shape + (3, 3))
        R[..., 0, 0] = cy * cp
        R[..., 0, 1] = cy * sp * sr - sy * cr
        R[..., 0, 2] = cy * sp * cr + sy * sr
        R[..., 1, 0] = sy * cp
        R[..., 1, 1] = sy * sp * sr + cy * cr
        R[..., 1, 2] = sy * sp * cr - cy * sr
        R[..., 2, 0] = -sp
        R[..., 2, 1] = cp * sr
        R[..., 2, 2] = cp * cr
        omega = np.stack([droll - dyaw * sp,
                          dpitch * cr + dyaw * sr * cp,
                          -dpitch * sr + dyaw * cr * cp], axis=-1)
        return p, v, a, R, omega

    def state_at(self, t_ns: int, ba=None, bg=None) -> KeyframeState:
        p, v, _, R, _ = self.sample((t_ns - self.spec.start_ns) * 1e-9)
        return KeyframeState(t_ns, p, v, rot_to_quat(R),
                             np.zeros(3) if ba is None else ba,
                             np.zeros(3) if bg is None else bg)


def generate_ground_truth(spec: TrajectorySpec):
    """Analytic keyframe states and the continuous sampler."""
    traj = Trajectory(spec)
    return [traj.state_at(int(t)) for t in spec.keyframe_times_ns()], traj


def synthesize_imu(traj: Trajectory, noise: ImuNoiseModel | None = None, ba=None, bg=None,
                   seed=None, g_magnitude: float = 9.81) -> ImuMeasurements:
    """Accelerometer and gyroscope readings along ``traj``.

    ``noise=None`` produces noiseless readings (biases are still added).
    """
    spec = traj.spec
    t_ns = spec.imu_times_ns()
    _, _, a, R, omega = traj.sample((t_ns - spec.start_ns) * 1e-9)
    g = gravity_vector(g_magnitude)
    accel = np.einsum("nba,nb->na", R, a - g)
    gyro = omega.copy()
    if ba is not None:
        accel = accel + ba
    if bg is not None:
        gyro = gyro + bg
    if noise is not None:
        rng = np.random.default_rng(seed)
        dt = 1.0 / spec.imu_rate
        gyro = gyro + rng.normal(0.0, noise.gyro_noise / np.sqrt(dt), gyro.shape)
        accel = accel + rng.normal(0.0, noise.accel_noise / np.sqrt(dt), accel.shape)
    return ImuMeasurements(t_ns, gyro, accel)


def integrate_keyframes(initial: KeyframeState, imu: ImuMeasurements, keyframe_ns,
                        g_magnitude: float = 9.81) -> list[KeyframeState]:
    """Dead-reckon keyframe states through ``imu`` at the initial biases."""
    states = [initial.copy()]
    g = gravity_vector(g_magnitude)
    for t0, t1 in zip(keyframe_ns[:-1], keyframe_ns[1:]):
        pre = preintegrate(imu.segment(int(t0), int(t1)), initial.ba, initial.bg)
        states.append(propagate_state(states[-1], pre, g))
    return states


def _auto_box(cam_p, scene):
    lo = cam_p.min(axis=0) - scene.max_depth
    hi = cam_p.max(axis=0) + scene.max_depth
    return lo, hi


def _camera_points(states, ext, X):
    """Landmarks ``X`` (n, 3) in every keyframe's camera frame: (K, n, 3)."""
    out = []
    for s in states:
        Rc = s.R @ ext.R
        pc = s.p + s.R @ ext.translation
        out.append((X - pc) @ Rc)
    return np.stack(out)


def _visible(pc, intr, min_depth=1e-3, max_radius=1.2):
    depth = pc[..., 2]
    ok = depth > min_depth
    z = np.where(ok, depth, 1.0)[..., None]
    xy = pc[..., :2] / z
    ok &= np.linalg.norm(xy, axis=-1) < max_radius
    uv = intr.project(np.where(ok[..., None], pc, np.array([0.0, 0.0, 1.0])))
    return ok & intr.in_image(uv), uv


def place_landmarks(states, scene: SceneSpec, intr: CameraIntrinsics, ext: Extrinsics, rng):
    """Rejection-sample landmarks seen from at least ``scene.min_views`` keyframes
    at a depth within ``[min_depth, max_depth]``."""
    cam_p = np.array([s.p + s.R @ ext.translation for s in states])
    if scene.box_min is None or scene.box_max is None:
        lo, hi = _auto_box(cam_p, scene)
    else:
        lo, hi = np.asarray(scene.box_min, float), np.asarray(scene.box_max, float)
    need = scene.n_landmarks
    found = []
    for _ in range(500):
        X = rng.uniform(lo, hi, size=(20000, 3))
        pc = _camera_points(states, ext, X)
        vis, _ = _visible(pc, intr)
        vis &= (pc[..., 2] >= scene.min_depth) & (pc[..., 2] <= scene.max_depth)
        good = X[vis.sum(axis=0) >= min(scene.min_views, len(states))]
        found.extend(good[:need - len(found)])
        if len(found) >= need:
            break
    if len(found) < need:
        raise ValueError(f"could only place {len(found)} of {need} landmarks; "
                         "enlarge the box or relax min_views")
    return np.array(found)


def synthesize_tracks(states, scene: SceneSpec, intr: CameraIntrinsics, ext: Extrinsics,
                      pixel_sigma: float = 0.0, seed=None, landmarks=None):
    """Feature tracks of landmarks observed from the keyframe ``states``.

    Returns ``(tracks, landmarks)``.  Observations behind a camera or
    outside the image are omitted; pixel noise is added before
    back-projection.
    """
    rng = np.random.default_rng(seed)
    if landmarks is None:
        landmarks = place_landmarks(states, scene, intr, ext, rng)
    pc = _camera_points(states, ext, landmarks)
    vis, uv = _visible(pc, intr)
    tracks = []
    for l in range(len(landmarks)):
        kfs = np.flatnonzero(vis[:, l])
        if len(kfs) == 0:
            continue
        pix = uv[kfs, l]
        if pixel_sigma > 0:
            pix = pix + rng.normal(0.0, pixel_sigma, pix.shape)
        bearings, ok = intr.back_project_many(pix)
        obs = [Observation(int(k), pix[n], bearings[n]) for n, k in enumerate(kfs) if ok[n]]
        if obs:
            tracks.append(FeatureTrack(l, obs))
    return tracks, landmarks


def perturb_states(states, spec: PerturbationSpec) -> list[KeyframeState]:
    rng = np.random.default_rng(spec.seed)
    out = []
    for s in states:
        out.append(KeyframeState(
            s.t_ns,
            s.p + rng.normal(0.0, spec.position_sigma, 3),
            s.v + rng.normal(0.0, spec.velocity_sigma, 3),
            quat_boxplus(s.q, rng.normal(0.0, spec.orientation_sigma, 3)),
            s.ba + rng.normal(0.0, spec.accel_bias_sigma, 3),
            s.bg + rng.normal(0.0, spec.gyro_bias_sigma, 3),
        ))
    return out


@dataclass
class SimulationConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.euroc)
    extrinsics: Extrinsics = field(default_factory=default_extrinsics)
    imu_noise: bool = True
    pixel_sigma: float = 1.0
    accel_bias: tuple = (0.05, -0.03, 0.08)
    gyro_bias: tuple = (0.002, -0.001, 0.003)
    perturbation: PerturbationSpec | None = field(default_factory=PerturbationSpec)
    gravity: float = 9.81
    seed: int = 0


def simulate(config: SimulationConfig | None = None):
    """Complete synthetic dataset as a :class:`~slvba.dataio.DatasetBundle`.

    All randomness derives from ``config.seed``.
    """
    from .dataio import Calibration, DatasetBundle

    cfg = config or SimulationConfig()
    imu_seed, track_seed, pert_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    traj = Trajectory(cfg.trajectory)
    ba = np.asarray(cfg.accel_bias, float)
    bg = np.asarray(cfg.gyro_bias, float)
    kf_ns = cfg.trajectory.keyframe_times_ns()

    clean = synthesize_imu(traj, None, ba, bg, g_magnitude=cfg.gravity)
    truth = integrate_keyframes(traj.state_at(int(kf_ns[0]), ba, bg), clean, kf_ns, cfg.gravity)
    imu = (synthesize_imu(traj, cfg.noise, ba, bg, imu_seed, cfg.gravity)
           if cfg.imu_noise else clean)
    tracks, landmarks = synthesize_tracks(truth, cfg.scene, cfg.intrinsics, cfg.extrinsics,
                                          cfg.pixel_sigma, track_seed)
    initial = None
    if cfg.perturbation is not None:
        pert = cfg.perturbation
        seed = int(np.random.default_rng(pert_seed).integers(2 ** 31)) + pert.seed
        initial = perturb_states(truth, PerturbationSpec(
            pert.position_sigma, pert.orientation_sigma, pert.velocity_sigma,
            pert.accel_bias_sigma, pert.gyro_bias_sigma, seed))
    # calibration carries the weighting sigma; noiseless runs keep the nominal 1 px
    weight_sigma = cfg.pixel_sigma if cfg.pixel_sigma > 0 else 1.0
    calib = Calibration(cfg.intrinsics, cfg.extrinsics, cfg.gravity, cfg.noise, weight_sigma)
    return DatasetBundle(imu, kf_ns, tracks, calib, truth, initial, landmarks=landmarks)
