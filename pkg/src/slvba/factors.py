"""Visual residuals: the two-view epipolar factor and the reprojection factor.

Both come in a vectorised form working on all factors of a window at once
(used by the solver) and a single-factor form for inspection and tests.
Pose Jacobians are 6 columns wide, ordered ``[δp, δθ]`` with ``δθ`` a right
perturbation of the body-to-global rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import CameraIntrinsics, Extrinsics, skew, skew_batch
from .state import KeyframeState

MIN_BASELINE = 0.02
MIN_DEPTH = 1e-3


class DegenerateFactorError(ValueError):
    """The factor cannot be linearized at the current estimate."""


class Observation(NamedTuple):
    keyframe: int
    uv: np.ndarray
    bearing: np.ndarray


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list[Observation] = field(default_factory=list)

    def __post_init__(self):
        kfs = [o.keyframe for o in self.observations]
        if len(set(kfs)) != len(kfs):
            raise ValueError(f"track {self.feature_id} observes a keyframe twice")

    @property
    def keyframes(self):
        return [o.keyframe for o in self.observations]

    def __len__(self):
        return len(self.observations)


@dataclass(frozen=True)
class EpipolarFactor:
    i: int
    j: int
    z_i: np.ndarray
    z_j: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("epipolar factor needs two distinct keyframes")
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "huber"
    delta: float = 1.345

    def __post_init__(self):
        if self.kind not in ("none", "huber"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0.0:
            raise ValueError("huber delta must be positive")

    def rho(self, s):
        """Robustified cost of squared whitened norms ``s``."""
        s = np.asarray(s, dtype=float)
        if self.kind == "none":
            return s
        d = self.delta
        return np.where(s <= d * d, s, 2.0 * d * np.sqrt(s) - d * d)

    def weight(self, r):
        """IRLS weight ``ρ'(r²)`` for whitened residual norms ``r``."""
        r = np.asarray(r, dtype=float)
        if self.kind == "none":
            return np.ones_like(r)
        with np.errstate(divide="ignore"):
            return np.where(r <= self.delta, 1.0, self.delta / np.where(r > 0, r, 1.0))


def huber_weight(r: float, loss: RobustLoss) -> float:
    if r < 0:
        raise ValueError("residual norm must be non-negative")
    return float(loss.weight(r))


# ------------------------------------------------------------------ epipolar

def normalization_jacobian(t):
    """Jacobian of ``t / |t|`` with respect to ``t``; accepts ``(..., 3)``."""
    t = np.asarray(t, dtype=float)
    n = np.linalg.norm(t, axis=-1)[..., None, None]
    return np.eye(3) / n - t[..., :, None] * t[..., None, :] / n ** 3


def _cross(a, b):
    a = np.broadcast_to(a, np.broadcast_shapes(np.shape(a), np.shape(b)))
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def epipolar_batch(R, p, i, j, z_i, z_j, ext: Extrinsics,
                   min_baseline: float = MIN_BASELINE, jacobians: bool = True):
    """Epipolar residuals for factor arrays.

    ``R`` ``(K, 3, 3)`` and ``p`` ``(K, 3)`` hold the IMU poses of all
    keyframes; ``i``, ``j`` index them per factor.  Returns
    ``(r, J_i, J_j, valid)`` where ``J_*`` are ``(M, 6)`` and ``valid``
    masks factors whose camera baseline is at least ``min_baseline``.
    """
    R_ic = ext.R
    p_ic = ext.translation
    Ri, Rj = R[i], R[j]
    v_i = z_i @ R_ic.T
    v_j = z_j @ R_ic.T
    B = np.einsum("mab,mb->ma", Ri, v_i)
    A = np.einsum("mab,mb->ma", Rj, v_j)
    t = p[i] + Ri @ p_ic - p[j] - Rj @ p_ic
    norm = np.linalg.norm(t, axis=1)
    valid = norm >= min_baseline
    C = t / np.where(valid, norm, 1.0)[:, None]
    r = np.einsum("ma,ma->m", A, _cross(C, B))
    if not jacobians:
        return r, None, None, valid

    dr_dA = _cross(C, B)
    dr_dB = _cross(A, C)
    dr_dC = _cross(B, A)
    dC_dt = normalization_jacobian(np.where(valid[:, None], t, 1.0))
    dr_dt = np.einsum("ma,mab->mb", dr_dC, dC_dt)

    # row vectors a^T R [v]_x are written as cross products in the body frame
    gi = np.einsum("mba,mb->ma", Ri, dr_dt)
    gj = np.einsum("mba,mb->ma", Rj, dr_dt)
    Ji = np.empty((len(r), 6))
    Jj = np.empty((len(r), 6))
    Ji[:, :3] = dr_dt
    Jj[:, :3] = -dr_dt
    Ji[:, 3:] = _cross(v_i, np.einsum("mba,mb->ma", Ri, dr_dB)) + _cross(p_ic, gi)
    Jj[:, 3:] = _cross(v_j, np.einsum("mba,mb->ma", Rj, dr_dA)) - _cross(p_ic, gj)
    return r, Ji, Jj, valid


def epipolar_residual(state_i: KeyframeState, state_j: KeyframeState,
                      factor: EpipolarFactor, ext: Extrinsics,
                      min_baseline: float = MIN_BASELINE):
    """Unwhitened epipolar residual of one factor and its pose Jacobians.

    Raises :class:`DegenerateFactorError` when the camera baseline is below
    ``min_baseline``.
    """
    R = np.stack([state_i.R, state_j.R])
    p = np.stack([state_i.p, state_j.p])
    r, Ji, Jj, valid = epipolar_batch(R, p, np.array([0]), np.array([1]),
                                      np.asarray(factor.z_i, float)[None],
                                      np.asarray(factor.z_j, float)[None],
                                      ext, min_baseline)
    if not valid[0]:
        raise DegenerateFactorError("camera baseline below threshold")
    return float(r[0]), Ji[0], Jj[0]


def build_epipolar_factors(tracks: Sequence[FeatureTrack], pairing: str = "all-pairs",
                           sigma: float = 1.0) -> list[EpipolarFactor]:
    if pairing not in ("all-pairs", "consecutive"):
        raise ValueError(f"unknown pairing {pairing!r}")
    factors = []
    for track in tracks:
        obs = track.observations
        if pairing == "all-pairs":
            pairs = combinations(obs, 2)
        else:
            pairs = zip(obs[:-1], obs[1:])
        for a, b in pairs:
            factors.append(EpipolarFactor(a.keyframe, b.keyframe,
                                          np.asarray(a.bearing, float),
                                          np.asarray(b.bearing, float), sigma))
    return factors


# -------------------------------------------------------------- reprojection

def reprojection_batch(R, p, kf, landmarks, lm, uv, intr: CameraIntrinsics,
                       ext: Extrinsics, jacobians: bool = True):
    """Pixel residuals ``u - h_d(h_p(h_t(p_f)))`` for observation arrays.

    Returns ``(r, J_pose, J_lm, valid)`` with ``r`` ``(M, 2)``, ``J_pose``
    ``(M, 2, 6)`` and ``J_lm`` ``(M, 2, 3)``.  Observations with camera
    depth at or below 1 mm are flagged invalid.
    """
    R_ic = ext.R
    Rk = R[kf]
    pf = landmarks[lm]
    q = np.einsum("mba,mb->ma", Rk, pf - p[kf])
    pc = (q - ext.translation) @ R_ic
    depth = pc[:, 2]
    valid = depth > MIN_DEPTH
    z = np.where(valid, depth, 1.0)
    xy = pc[:, :2] / z[:, None]
    xy_d = intr.distort(xy)
    pred = np.stack([intr.fx * xy_d[:, 0] + intr.cx, intr.fy * xy_d[:, 1] + intr.cy], axis=1)
    r = uv - pred
    if not jacobians:
        return r, None, None, valid

    dn_dpc = np.zeros((len(r), 2, 3))
    dn_dpc[:, 0, 0] = 1.0 / z
    dn_dpc[:, 1, 1] = 1.0 / z
    dn_dpc[:, 0, 2] = -xy[:, 0] / z
    dn_dpc[:, 1, 2] = -xy[:, 1] / z
    Jd = intr.distort_jacobian(xy)
    Jd[:, 0, :] *= intr.fx
    Jd[:, 1, :] *= intr.fy
    dr_dq = -(Jd @ dn_dpc) @ R_ic.T

    J_pose = np.empty((len(r), 2, 6))
    J_pose[:, :, :3] = -dr_dq @ Rk.transpose(0, 2, 1)
    J_pose[:, :, 3:] = dr_dq @ skew_batch(q)
    J_lm = dr_dq @ Rk.transpose(0, 2, 1)
    return r, J_pose, J_lm, valid


def reprojection_residual(state: KeyframeState, landmark, u, intr: CameraIntrinsics,
                          ext: Extrinsics):
    """Pixel residual of one observation with Jacobians for the pose (2x6)
    and the landmark (2x3)."""
    r, Jp, Jl, valid = reprojection_batch(
        state.R[None], state.p[None], np.array([0]),
        np.asarray(landmark, float)[None], np.array([0]),
        np.asarray(u, float)[None], intr, ext)
    if not valid[0]:
        raise DegenerateFactorError("landmark is not in front of the camera")
    return r[0], Jp[0], Jl[0]
