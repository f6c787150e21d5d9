"""Finite-difference verification of every analytic Jacobian in the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import factors
from .geometry import CameraIntrinsics, Extrinsics, quat_from_rotvec, quat_normalize
from .preintegration import ImuMeasurements, ImuNoiseModel, imu_residual, preintegrate, propagate_state
from .state import KeyframeState

FD_STEP = 1e-6


def relative_error(analytic, numeric, floor: float = 1e-9) -> float:
    analytic = np.asarray(analytic, float)
    numeric = np.asarray(numeric, float)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_jacobian(f, x0_dim: int, retract, step: float = FD_STEP):
    """Central differences of ``f(retract(dx))`` at ``dx = 0``."""
    cols = []
    for k in range(x0_dim):
        e = np.zeros(x0_dim)
        e[k] = step
        cols.append((np.atleast_1d(f(retract(e))) - np.atleast_1d(f(retract(-e)))) / (2 * step))
    return np.stack(cols, axis=-1)


def random_quat(rng, scale=np.pi):
    return quat_from_rotvec(rng.uniform(-1, 1, 3) * scale / np.sqrt(3))


def random_state(rng, t_ns=0, bias_scale=0.05) -> KeyframeState:
    return KeyframeState(t_ns, rng.normal(0, 2, 3), rng.normal(0, 1, 3), random_quat(rng),
                         rng.normal(0, bias_scale, 3), rng.normal(0, bias_scale * 0.1, 3))


def _pose_retract(state: KeyframeState):
    def retract(d6):
        dx = np.zeros(15)
        dx[0:3] = d6[:3]
        dx[6:9] = d6[3:]
        return state.boxplus(dx)
    return retract


def random_extrinsics(rng) -> Extrinsics:
    return Extrinsics(random_quat(rng), rng.normal(0, 0.1, 3))


def epipolar_instance(rng, min_baseline=factors.MIN_BASELINE):
    """Random pair of states and a factor with baseline above the gate."""
    ext = random_extrinsics(rng)
    while True:
        si, sj = random_state(rng), random_state(rng)
        if rng.uniform() < 0.2:
            # near-degenerate: camera baseline just above the threshold
            target = rng.uniform(1.5, 5.0) * min_baseline
            ci = si.p + si.R @ ext.translation
            d = rng.normal(size=3)
            cj = ci + target * d / np.linalg.norm(d)
            sj.p = cj - sj.R @ ext.translation
        t = si.p + si.R @ ext.translation - sj.p - sj.R @ ext.translation
        if np.linalg.norm(t) > 1.2 * min_baseline:
            break
    zi = np.append(rng.uniform(-0.6, 0.6, 2), 1.0)
    zj = np.append(rng.uniform(-0.6, 0.6, 2), 1.0)
    return si, sj, factors.EpipolarFactor(0, 1, zi, zj, 1.0), ext


def check_epipolar(rng):
    si, sj, f, ext = epipolar_instance(rng)
    _, Ji, Jj = factors.epipolar_residual(si, sj, f, ext)
    ri, rj = _pose_retract(si), _pose_retract(sj)
    Ni = numeric_jacobian(lambda s: factors.epipolar_residual(s, sj, f, ext)[0], 6, ri)[0]
    Nj = numeric_jacobian(lambda s: factors.epipolar_residual(si, s, f, ext)[0], 6, rj)[0]
    return max(relative_error(Ji, Ni), relative_error(Jj, Nj))


def check_reprojection(rng, intr: CameraIntrinsics | None = None):
    intr = intr or CameraIntrinsics.euroc()
    ext = random_extrinsics(rng)
    s = random_state(rng)
    cam_R = s.R @ ext.R
    cam_p = s.p + s.R @ ext.translation
    pc = np.append(rng.uniform(-0.5, 0.5, 2), 1.0) * rng.uniform(1.0, 10.0)
    lm = cam_R @ pc + cam_p
    u = intr.project(pc) + rng.normal(0, 2.0, 2)
    _, Jp, Jl = factors.reprojection_residual(s, lm, u, intr, ext)
    Np = numeric_jacobian(lambda st: factors.reprojection_residual(st, lm, u, intr, ext)[0],
                          6, _pose_retract(s))
    Nl = numeric_jacobian(lambda x: factors.reprojection_residual(s, x, u, intr, ext)[0],
                          3, lambda d: lm + d)
    return max(relative_error(Jp, Np), relative_error(Jl, Nl))


def imu_instance(rng, n_samples=40, rate_hz=200.0):
    """Random preintegration plus a pair of nearly consistent states."""
    dt_ns = int(round(1e9 / rate_hz))
    t = np.arange(n_samples, dtype=np.int64) * dt_ns
    gyro = rng.normal(0, 0.8, 3) + rng.normal(0, 0.3, (n_samples, 3))
    accel = np.array([0, 0, 9.81]) + rng.normal(0, 1.5, 3) + rng.normal(0, 0.5, (n_samples, 3))
    lin_ba = rng.normal(0, 0.05, 3)
    lin_bg = rng.normal(0, 0.005, 3)
    pre = preintegrate(ImuMeasurements(t, gyro, accel), lin_ba, lin_bg, ImuNoiseModel())
    si = random_state(rng)
    si.ba = lin_ba + rng.normal(0, 0.02, 3)
    si.bg = lin_bg + rng.normal(0, 0.002, 3)
    sj = propagate_state(si, pre)
    sj = sj.boxplus(np.concatenate([rng.normal(0, 0.05, 3), rng.normal(0, 0.05, 3),
                                    rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3),
                                    rng.normal(0, 0.001, 3)]))
    return pre, si, sj


def check_imu(rng):
    pre, si, sj = imu_instance(rng)
    _, Ji, Jj = imu_residual(pre, si, sj)
    Ni = numeric_jacobian(lambda s: imu_residual(pre, s, sj, jacobians=False)[0], 15, si.boxplus)
    Nj = numeric_jacobian(lambda s: imu_residual(pre, si, s, jacobians=False)[0], 15, sj.boxplus)
    return max(relative_error(Ji, Ni), relative_error(Jj, Nj))


@dataclass
class JacobianReport:
    suite: str
    trials: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_suites(seed: int = 0, trials: int = 100, tolerance: float = 1e-4) -> list[JacobianReport]:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    reports = []
    for name, check in (("epipolar", check_epipolar), ("reprojection", check_reprojection),
                        ("imu", check_imu)):
        worst = max(check(rng) for _ in range(trials))
        reports.append(JacobianReport(name, trials, worst, tolerance))
    return reports
