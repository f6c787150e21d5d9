"""IMU preintegration between consecutive keyframes.

Samples are integrated with the midpoint rule.  Alongside the preintegrated
position/velocity/rotation terms the discrete error-state transition is
propagated to obtain first-order bias Jacobians and the 15x15 measurement
covariance over ``[α, β, γ-tangent, b_a, b_g]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .geometry import (
    gravity_vector,
    quat_boxminus,
    quat_conj,
    quat_conj_batch,
    quat_from_rotvec,
    quat_identity,
    quat_mul,
    quat_mul_batch,
    quat_normalize,
    quat_to_rot,
    quat_to_rot_batch,
    right_jacobian,
    right_jacobian_batch,
    right_jacobian_inv,
    rotvec_from_quat_batch,
    skew,
    skew_batch,
    so3_exp,
)
from .state import BA, BG, ERROR_DIM, TH, KeyframeState

ALPHA, BETA, GAMMA = slice(0, 3), slice(3, 6), slice(6, 9)
V = slice(3, 6)
P = slice(0, 3)


@dataclass(frozen=True)
class ImuSample:
    t_ns: int
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time IMU noise densities (EuRoC-class defaults)."""

    gyro_noise: float = 1.7e-4  # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9393e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3  # m/s^3/sqrt(Hz)

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")


class ImuMeasurements:
    """Time-ordered IMU stream stored column-wise.

    ``t_ns`` is an int64 array of nanosecond timestamps, ``gyro`` and
    ``accel`` are ``(n, 3)`` arrays in the body frame.
    """

    def __init__(self, t_ns, gyro, accel):
        self.t_ns = np.asarray(t_ns, dtype=np.int64)
        self.gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        if not (len(self.t_ns) == len(self.gyro) == len(self.accel)):
            raise ValueError("timestamp, gyro and accel lengths differ")
        if len(self.t_ns) > 1 and np.any(np.diff(self.t_ns) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuMeasurements":
        if len(samples) == 0:
            return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls([s.t_ns for s in samples], [s.gyro for s in samples],
                   [s.accel for s in samples])

    def __len__(self):
        return len(self.t_ns)

    def __getitem__(self, k) -> ImuSample:
        return ImuSample(int(self.t_ns[k]), self.gyro[k].copy(), self.accel[k].copy())

    def __eq__(self, other):
        return (isinstance(other, ImuMeasurements)
                and np.array_equal(self.t_ns, other.t_ns)
                and np.array_equal(self.gyro, other.gyro)
                and np.array_equal(self.accel, other.accel))

    def _interp(self, t):
        k = int(np.searchsorted(self.t_ns, t)) - 1
        t0, t1 = self.t_ns[k], self.t_ns[k + 1]
        w = (t - t0) / (t1 - t0)
        return ((1 - w) * self.gyro[k] + w * self.gyro[k + 1],
                (1 - w) * self.accel[k] + w * self.accel[k + 1])

    def segment(self, t0_ns: int, t1_ns: int) -> "ImuMeasurements":
        """Samples covering ``[t0_ns, t1_ns]``, with linearly interpolated
        samples inserted at the ends when they fall between readings."""
        if t1_ns <= t0_ns:
            raise ValueError("segment end must follow its start")
        if len(self) == 0 or t0_ns < self.t_ns[0] or t1_ns > self.t_ns[-1]:
            raise ValueError(f"IMU stream does not cover [{t0_ns}, {t1_ns}]")
        inside = (self.t_ns >= t0_ns) & (self.t_ns <= t1_ns)
        t = list(self.t_ns[inside])
        g = list(self.gyro[inside])
        a = list(self.accel[inside])
        if not t or t[0] != t0_ns:
            gi, ai = self._interp(t0_ns)
            t.insert(0, t0_ns), g.insert(0, gi), a.insert(0, ai)
        if t[-1] != t1_ns:
            gi, ai = self._interp(t1_ns)
            t.append(t1_ns), g.append(gi), a.append(ai)
        return ImuMeasurements(t, g, a)


@dataclass
class PreintegratedImu:
    """Preintegrated IMU terms between two keyframes.

    ``jacobian`` is the full 15x15 derivative of the preintegrated error
    state with respect to the starting error state; the bias Jacobians are
    views into its last six columns.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    jacobian: np.ndarray
    covariance: np.ndarray
    dt_total: float
    lin_ba: np.ndarray
    lin_bg: np.ndarray
    t0_ns: int = 0
    t1_ns: int = 0
    n_samples: int = field(default=0, compare=False)

    @property
    def J_alpha_ba(self):
        return self.jacobian[ALPHA, BA]

    @property
    def J_alpha_bg(self):
        return self.jacobian[ALPHA, BG]

    @property
    def J_beta_ba(self):
        return self.jacobian[BETA, BA]

    @property
    def J_beta_bg(self):
        return self.jacobian[BETA, BG]

    @property
    def J_gamma_bg(self):
        return self.jacobian[GAMMA, BG]

    @cached_property
    def sqrt_covariance(self):
        """Lower Cholesky factor ``L`` of the covariance."""
        return cholesky(self.covariance, lower=True)

    @cached_property
    def whitening(self):
        """``L^-1``; multiplying a residual by it gives unit covariance."""
        return solve_triangular(self.sqrt_covariance, np.eye(ERROR_DIM), lower=True)

    def whiten(self, x):
        """``L^-1 x`` for a vector or a matrix with 15 rows."""
        return self.whitening @ x


def _as_measurements(samples) -> ImuMeasurements:
    if isinstance(samples, ImuMeasurements):
        return samples
    return ImuMeasurements.from_samples(list(samples))


def preintegrate(samples, lin_ba, lin_bg, noise: ImuNoiseModel | None = None) -> PreintegratedImu:
    """Midpoint preintegration of ``samples`` at the given linearization biases.

    ``samples`` is an :class:`ImuMeasurements` or a sequence of
    :class:`ImuSample`; the first and last timestamps delimit the segment.
    """
    imu = _as_measurements(samples)
    noise = noise or ImuNoiseModel()
    if len(imu) < 2:
        raise ValueError("preintegration needs at least two IMU samples")
    if np.any(np.diff(imu.t_ns) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    ba = np.asarray(lin_ba, dtype=float)
    bg = np.asarray(lin_bg, dtype=float)

    alpha = np.zeros(3)
    beta = np.zeros(3)
    q = quat_identity()
    R = np.eye(3)
    J = np.eye(ERROR_DIM)
    cov = np.zeros((ERROR_DIM, ERROR_DIM))
    I3 = np.eye(3)
    acc_var = noise.accel_noise ** 2
    gyr_var = noise.gyro_noise ** 2
    acc_walk_var = noise.accel_walk ** 2
    gyr_walk_var = noise.gyro_walk ** 2

    dts = np.diff(imu.t_ns) * 1e-9
    for k, dt in enumerate(dts):
        a0 = imu.accel[k] - ba
        a1 = imu.accel[k + 1] - ba
        w = 0.5 * (imu.gyro[k] + imu.gyro[k + 1]) - bg
        phi = w * dt
        dR = so3_exp(phi)
        q1 = quat_normalize(quat_mul(q, quat_from_rotvec(phi)))
        R1 = quat_to_rot(q1)
        acc = 0.5 * (R @ a0 + R1 @ a1)

        Jr = right_jacobian(phi)
        R1a1x = R1 @ skew(a1)
        dacc_dth = -0.5 * (R @ skew(a0) + R1a1x @ dR.T)
        dacc_dba = -0.5 * (R + R1)
        dacc_dbg = 0.5 * dt * R1a1x @ Jr
        hdt2 = 0.5 * dt * dt

        F = np.eye(ERROR_DIM)
        F[ALPHA, BETA] = dt * I3
        F[ALPHA, TH] = hdt2 * dacc_dth
        F[ALPHA, BA] = hdt2 * dacc_dba
        F[ALPHA, BG] = hdt2 * dacc_dbg
        F[BETA, TH] = dt * dacc_dth
        F[BETA, BA] = dt * dacc_dba
        F[BETA, BG] = dt * dacc_dbg
        F[GAMMA, GAMMA] = dR.T
        F[GAMMA, BG] = -dt * Jr

        # measurement noise enters exactly like the biases; walks drive the biases
        G = np.zeros((ERROR_DIM, 12))
        G[:9, 0:3] = F[:9, BA]
        G[:9, 3:6] = F[:9, BG]
        G[BA, 6:9] = I3
        G[BG, 9:12] = I3
        q_diag = np.repeat([acc_var / dt, gyr_var / dt, acc_walk_var * dt, gyr_walk_var * dt], 3)

        cov = F @ cov @ F.T + (G * q_diag) @ G.T
        J = F @ J

        alpha = alpha + beta * dt + hdt2 * acc
        beta = beta + acc * dt
        q, R = q1, R1

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(alpha, beta, q, J, cov, float(np.sum(dts)),
                            ba.copy(), bg.copy(), int(imu.t_ns[0]), int(imu.t_ns[-1]),
                            len(imu))


def compose(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Chain two adjacent preintegrations sharing linearization biases."""
    if not (np.allclose(first.lin_ba, second.lin_ba) and np.allclose(first.lin_bg, second.lin_bg)):
        raise ValueError("preintegrations use different linearization biases")
    R1 = quat_to_rot(first.gamma)
    R2 = quat_to_rot(second.gamma)
    dt2 = second.dt_total
    I3 = np.eye(3)

    # error of the combined segment in terms of the first segment's error
    Phi = np.eye(ERROR_DIM)
    Phi[ALPHA, BETA] = dt2 * I3
    Phi[ALPHA, TH] = -R1 @ skew(second.alpha)
    Phi[ALPHA, BA] = R1 @ second.J_alpha_ba
    Phi[ALPHA, BG] = R1 @ second.J_alpha_bg
    Phi[BETA, TH] = -R1 @ skew(second.beta)
    Phi[BETA, BA] = R1 @ second.J_beta_ba
    Phi[BETA, BG] = R1 @ second.J_beta_bg
    Phi[GAMMA, GAMMA] = R2.T
    Phi[GAMMA, BG] = second.J_gamma_bg
    # ... and in terms of the second segment's own noise
    Psi = np.eye(ERROR_DIM)
    Psi[ALPHA, ALPHA] = R1
    Psi[BETA, BETA] = R1

    cov = Phi @ first.covariance @ Phi.T + Psi @ second.covariance @ Psi.T
    return PreintegratedImu(
        first.alpha + first.beta * dt2 + R1 @ second.alpha,
        first.beta + R1 @ second.beta,
        quat_normalize(quat_mul(first.gamma, second.gamma)),
        Phi @ first.jacobian,
        0.5 * (cov + cov.T),
        first.dt_total + dt2,
        first.lin_ba.copy(), first.lin_bg.copy(),
        first.t0_ns, second.t1_ns,
        first.n_samples + second.n_samples - 1,
    )


def _small_quat_rotvec(phi):
    """Rotation vector of ``normalize([1, φ/2])`` and its derivative in φ."""
    n = np.linalg.norm(phi)
    if n < 1e-12:
        return phi.copy(), np.eye(3)
    u = phi / n
    mag = 2.0 * np.arctan(0.5 * n)
    uu = np.outer(u, u)
    D = mag / n * (np.eye(3) - uu) + uu / (1.0 + 0.25 * n * n)
    return mag * u, D


def correct_for_bias_delta(p: PreintegratedImu, ba, bg):
    """First-order bias update of ``(α, β, γ)`` for new biases ``ba``, ``bg``."""
    dba = np.asarray(ba, dtype=float) - p.lin_ba
    dbg = np.asarray(bg, dtype=float) - p.lin_bg
    alpha = p.alpha + p.J_alpha_ba @ dba + p.J_alpha_bg @ dbg
    beta = p.beta + p.J_beta_ba @ dba + p.J_beta_bg @ dbg
    half = 0.5 * (p.J_gamma_bg @ dbg)
    gamma = quat_normalize(quat_mul(p.gamma, np.concatenate(([1.0], half))))
    return alpha, beta, gamma


def imu_residual(p: PreintegratedImu, si: KeyframeState, sj: KeyframeState,
                 g=None, jacobians: bool = True):
    """Residual between two consecutive keyframe states.

    Returns ``(r, J_i, J_j)`` with ``r`` ordered ``[α, β, γ, b_a, b_g]``
    and the 15x15 Jacobians taken with respect to each keyframe's error
    state.  Nothing is whitened here.
    """
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    dt = p.dt_total
    alpha_c, beta_c, gamma_c = correct_for_bias_delta(p, si.ba, si.bg)
    Ri = si.R
    alpha_bar = Ri.T @ (sj.p - si.p - si.v * dt - 0.5 * g * dt * dt)
    beta_bar = Ri.T @ (sj.v - si.v - g * dt)
    gamma_bar = quat_mul(quat_conj(si.q), sj.q)
    r_th = quat_boxminus(gamma_c, gamma_bar)

    r = np.concatenate([alpha_c - alpha_bar, beta_c - beta_bar, r_th,
                        sj.ba - si.ba, sj.bg - si.bg])
    if not jacobians:
        return r, None, None

    I3 = np.eye(3)
    Ji = np.zeros((ERROR_DIM, ERROR_DIM))
    Jj = np.zeros((ERROR_DIM, ERROR_DIM))

    Ji[ALPHA, P] = Ri.T
    Ji[ALPHA, V] = Ri.T * dt
    Ji[ALPHA, TH] = -skew(alpha_bar)
    Ji[ALPHA, BA] = p.J_alpha_ba
    Ji[ALPHA, BG] = p.J_alpha_bg
    Jj[ALPHA, P] = -Ri.T

    Ji[BETA, V] = Ri.T
    Ji[BETA, TH] = -skew(beta_bar)
    Ji[BETA, BA] = p.J_beta_ba
    Ji[BETA, BG] = p.J_beta_bg
    Jj[BETA, V] = -Ri.T

    Jr_inv = right_jacobian_inv(r_th)
    phi = p.J_gamma_bg @ (si.bg - p.lin_bg)
    psi, dpsi = _small_quat_rotvec(phi)
    Ji[GAMMA, TH] = Jr_inv @ quat_to_rot(gamma_c).T
    Ji[GAMMA, BG] = Jr_inv @ right_jacobian(psi) @ dpsi @ p.J_gamma_bg
    Jj[GAMMA, TH] = -Jr_inv.T

    Ji[BA, BA] = -I3
    Jj[BA, BA] = I3
    Ji[BG, BG] = -I3
    Jj[BG, BG] = I3
    return r, Ji, Jj


@dataclass(frozen=True)
class PreintegrationStack:
    """Several preintegrations stacked along a leading axis."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    jacobian: np.ndarray
    whitening: np.ndarray
    dt: np.ndarray
    lin_ba: np.ndarray
    lin_bg: np.ndarray

    @classmethod
    def of(cls, preints: Sequence[PreintegratedImu]) -> "PreintegrationStack":
        return cls(*(np.stack([getattr(p, name) for p in preints]) for name in
                     ("alpha", "beta", "gamma", "jacobian", "whitening")),
                   np.array([p.dt_total for p in preints]),
                   np.stack([p.lin_ba for p in preints]),
                   np.stack([p.lin_bg for p in preints]))

    def __len__(self):
        return len(self.dt)


def _small_quat_rotvec_batch(phi):
    n = np.linalg.norm(phi, axis=-1)
    small = n < 1e-12
    safe = np.where(small, 1.0, n)
    u = phi / safe[:, None]
    mag = np.where(small, 1.0, 2.0 * np.arctan(0.5 * n) / safe)
    uu = u[:, :, None] * u[:, None, :]
    D = (mag[:, None, None] * (np.eye(3) - uu)
         + uu / (1.0 + 0.25 * n * n)[:, None, None])
    D = np.where(small[:, None, None], np.eye(3), D)
    return mag[:, None] * phi, D


def imu_residual_batch(stack: PreintegrationStack, p, v, q, ba, bg, g=None,
                       jacobians: bool = True):
    """Vectorised :func:`imu_residual` over consecutive states.

    State arrays hold ``len(stack) + 1`` rows; factor ``k`` links rows
    ``k`` and ``k + 1``.  Returns ``(r, J_i, J_j)`` with leading axis ``k``.
    """
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    n = len(stack)
    dt = stack.dt[:, None]
    J = stack.jacobian
    dba = ba[:-1] - stack.lin_ba
    dbg = bg[:-1] - stack.lin_bg
    alpha_c = stack.alpha + np.einsum("kab,kb->ka", J[:, ALPHA, BA], dba) \
        + np.einsum("kab,kb->ka", J[:, ALPHA, BG], dbg)
    beta_c = stack.beta + np.einsum("kab,kb->ka", J[:, BETA, BA], dba) \
        + np.einsum("kab,kb->ka", J[:, BETA, BG], dbg)
    phi = np.einsum("kab,kb->ka", J[:, GAMMA, BG], dbg)
    corr = np.concatenate([np.ones((n, 1)), 0.5 * phi], axis=1)
    corr /= np.linalg.norm(corr, axis=1, keepdims=True)
    gamma_c = quat_mul_batch(stack.gamma, corr)
    gamma_c /= np.linalg.norm(gamma_c, axis=1, keepdims=True)

    Ri = quat_to_rot_batch(q[:-1])
    RiT = np.swapaxes(Ri, 1, 2)
    alpha_bar = np.einsum("kba,kb->ka", Ri,
                          p[1:] - p[:-1] - v[:-1] * dt - 0.5 * g * dt * dt)
    beta_bar = np.einsum("kba,kb->ka", Ri, v[1:] - v[:-1] - g * dt)
    gamma_bar = quat_mul_batch(quat_conj_batch(q[:-1]), q[1:])
    r_th = rotvec_from_quat_batch(quat_mul_batch(quat_conj_batch(gamma_bar), gamma_c))
    r = np.concatenate([alpha_c - alpha_bar, beta_c - beta_bar, r_th,
                        ba[1:] - ba[:-1], bg[1:] - bg[:-1]], axis=1)
    if not jacobians:
        return r, None, None

    I3 = np.eye(3)
    Ji = np.zeros((n, ERROR_DIM, ERROR_DIM))
    Jj = np.zeros((n, ERROR_DIM, ERROR_DIM))
    Ji[:, ALPHA, P] = RiT
    Ji[:, ALPHA, V] = RiT * dt[:, :, None]
    Ji[:, ALPHA, TH] = -skew_batch(alpha_bar)
    Ji[:, ALPHA, BA] = J[:, ALPHA, BA]
    Ji[:, ALPHA, BG] = J[:, ALPHA, BG]
    Jj[:, ALPHA, P] = -RiT

    Ji[:, BETA, V] = RiT
    Ji[:, BETA, TH] = -skew_batch(beta_bar)
    Ji[:, BETA, BA] = J[:, BETA, BA]
    Ji[:, BETA, BG] = J[:, BETA, BG]
    Jj[:, BETA, V] = -RiT

    Jr_inv = right_jacobian_batch(r_th, inverse=True)
    psi, dpsi = _small_quat_rotvec_batch(phi)
    Ji[:, GAMMA, TH] = Jr_inv @ np.swapaxes(quat_to_rot_batch(gamma_c), 1, 2)
    Ji[:, GAMMA, BG] = Jr_inv @ right_jacobian_batch(psi) @ dpsi @ J[:, GAMMA, BG]
    Jj[:, GAMMA, TH] = -np.swapaxes(Jr_inv, 1, 2)

    Ji[:, BA, BA] = -I3
    Jj[:, BA, BA] = I3
    Ji[:, BG, BG] = -I3
    Jj[:, BG, BG] = I3
    return r, Ji, Jj


def propagate_state(si: KeyframeState, p: PreintegratedImu, g=None) -> KeyframeState:
    """State at the end of ``p`` that makes the IMU residual vanish."""
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    alpha, beta, gamma = correct_for_bias_delta(p, si.ba, si.bg)
    dt = p.dt_total
    Ri = si.R
    return KeyframeState(
        p.t1_ns,
        si.p + si.v * dt + 0.5 * g * dt * dt + Ri @ alpha,
        si.v + g * dt + Ri @ beta,
        quat_normalize(quat_mul(si.q, gamma)),
        si.ba, si.bg,
    )
