"""Rotation algebra, rigid transforms and the pinhole/radtan camera model.

Quaternions are plain ``(4,)`` numpy arrays in Hamilton convention, stored
``[w, x, y, z]``.  A keyframe orientation ``q`` maps body vectors into the
global frame (``v_G = R(q) @ v_I``).  Tangent increments are applied on the
right: ``q ⊞ δ = q ⊗ exp(δ/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY_MAGNITUDE = 9.81
_SMALL_ANGLE = 1e-8


def gravity_vector(magnitude: float = GRAVITY_MAGNITUDE) -> np.ndarray:
    """Gravity in the gravity-aligned global frame (z axis points up)."""
    return np.array([0.0, 0.0, -float(magnitude)])


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def skew_batch(v):
    """Stack of skew matrices for ``(n, 3)`` input."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------- quaternions

def quat_identity():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def quat_exp(v):
    """Exponential of the pure quaternion ``[0, v]``."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    if theta < _SMALL_ANGLE:
        # second-order Taylor expansion of (cos θ, sin θ / θ · v)
        return quat_normalize(np.concatenate(([1.0 - 0.5 * theta * theta], v)))
    return np.concatenate(([np.cos(theta)], np.sin(theta) / theta * v))


def quat_log(q):
    """Logarithm of a unit quaternion, returning the vector part.

    The sign of ``q`` is chosen so that ``w >= 0``; the result therefore
    has norm at most ``π/2`` and ``2 * quat_log(q)`` is the shortest
    rotation vector.
    """
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    n = np.linalg.norm(q[1:])
    if n < _SMALL_ANGLE:
        return q[1:] / q[0] if q[0] > 0.0 else np.zeros(3)
    return np.arctan2(n, q[0]) / n * q[1:]


def quat_from_rotvec(phi):
    return quat_exp(0.5 * np.asarray(phi, dtype=float))


def rotvec_from_quat(q):
    return 2.0 * quat_log(q)


def quat_boxplus(q, delta):
    """Right-perturb ``q`` by the tangent vector ``delta`` (radians)."""
    return quat_normalize(quat_mul(q, quat_exp(0.5 * np.asarray(delta, dtype=float))))


def quat_boxminus(q1, q2):
    """Tangent vector ``δ`` such that ``q2 ⊞ δ = q1``, with ``|δ| <= π``."""
    return 2.0 * quat_log(quat_mul(quat_conj(q2), q1))


def quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    """Shepperd's method; the returned quaternion has ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


# ------------------------------------------------------------------------ SO(3)

def so3_exp(phi):
    """Rotation matrix of the rotation vector ``phi`` (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    return rotvec_from_quat(rot_to_quat(R))


def right_jacobian(phi):
    """Right Jacobian of SO(3): ``Exp(φ + dφ) ≈ Exp(φ) Exp(Jr(φ) dφ)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return (np.eye(3) - (1.0 - np.cos(theta)) / t2 * K
            + (theta - np.sin(theta)) / (t2 * theta) * K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    t2 = theta * theta
    c = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


# batched variants over a leading axis

def quat_mul_batch(p, q):
    return np.stack(quat_mul(np.moveaxis(p, -1, 0), np.moveaxis(q, -1, 0)), axis=-1)


def quat_conj_batch(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_rot_batch(q):
    return np.moveaxis(quat_to_rot(np.moveaxis(q, -1, 0)), (0, 1), (-2, -1))


def rotvec_from_quat_batch(q):
    q = np.where(q[..., :1] < 0.0, -q, q)
    n = np.linalg.norm(q[..., 1:], axis=-1)
    small = n < _SMALL_ANGLE
    scale = np.where(small, 1.0 / np.where(q[..., 0] > 0, q[..., 0], 1.0),
                     np.arctan2(n, q[..., 0]) / np.where(small, 1.0, n))
    return 2.0 * scale[..., None] * q[..., 1:]


def _jacobian_coeffs(phi, inverse):
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-5
    t = np.where(small, 1.0, theta)
    t2 = t * t
    if inverse:
        a = np.full_like(theta, 0.5)
        b = np.where(small, 1.0 / 12.0,
                     1.0 / t2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    else:
        a = np.where(small, -0.5, -(1.0 - np.cos(t)) / t2)
        b = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / (t2 * t))
    return a, b


def right_jacobian_batch(phi, inverse=False):
    """Stack of right Jacobians (or their inverses) for ``(n, 3)`` input."""
    K = skew_batch(phi)
    a, b = _jacobian_coeffs(phi, inverse)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx(R):
    """(yaw, pitch, roll) with ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    yaw = np.arctan2(R[1, 0], R[0, 0])
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    return yaw, pitch, roll


def rot_from_euler_zyx(yaw, pitch, roll):
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def yaw_of(q):
    return euler_zyx(quat_to_rot(q))[0]


# -------------------------------------------------------------------- poses

@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p_B = R p_A + t`` for a pose of frame A in frame B."""

    rotation: np.ndarray = field(default_factory=quat_identity)
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    @property
    def R(self):
        return quat_to_rot(self.rotation)

    def inverse(self) -> "Pose":
        qi = quat_conj(self.rotation)
        return Pose(qi, -quat_to_rot(qi) @ self.position)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(quat_mul(self.rotation, other.rotation),
                    self.R @ other.position + self.position)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)


def transform_point(pose: Pose, p):
    return pose.R @ np.asarray(p, dtype=float) + pose.position


@dataclass(frozen=True)
class Extrinsics:
    """Camera-to-IMU transform: ``p_I = R_IC p_C + p_IC``."""

    rotation: np.ndarray = field(default_factory=quat_identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @property
    def R(self):
        return quat_to_rot(self.rotation)


def imu_pose_to_camera_pose(imu: Pose, ext: Extrinsics) -> Pose:
    return Pose(quat_mul(imu.rotation, ext.rotation),
                imu.position + imu.R @ ext.translation)


# ------------------------------------------------------------------- camera

class UndistortionError(ValueError):
    """Iterative undistortion did not converge."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with radial-tangential (plumb-bob) distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 752
    height: int = 480

    @classmethod
    def euroc(cls) -> "CameraIntrinsics":
        """Left camera of the EuRoC MAV sensor rig."""
        return cls(458.654, 457.296, 367.215, 248.375,
                   -0.28340811, 0.07395907, 0.00019359, 1.76187114e-05, 752, 480)

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def distort(self, xy):
        """Apply distortion to normalized coordinates, shape ``(..., 2)``."""
        xy = np.asarray(xy, dtype=float)
        x, y = xy[..., 0], xy[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def distort_jacobian(self, xy):
        """d(distorted)/d(undistorted), shape ``(..., 2, 2)``."""
        xy = np.asarray(xy, dtype=float)
        x, y = xy[..., 0], xy[..., 1]
        k1, k2, p1, p2 = self.k1, self.k2, self.p1, self.p2
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dradial = 2.0 * k1 + 4.0 * k2 * r2  # d radial / d(r2) * 2
        J = np.empty(xy.shape[:-1] + (2, 2))
        J[..., 0, 0] = radial + x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x
        J[..., 0, 1] = x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
        J[..., 1, 0] = x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
        J[..., 1, 1] = radial + y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x
        return J

    def undistort(self, xy_d, max_iter: int = 20, tol: float = 1e-14):
        """Invert :meth:`distort` by Gauss-Newton.

        Returns ``(xy, converged)`` where ``converged`` is a boolean array
        with the leading shape of the input.
        """
        xy_d = np.asarray(xy_d, dtype=float)
        xy = xy_d.copy()
        converged = np.zeros(xy_d.shape[:-1], dtype=bool)
        for _ in range(max_iter):
            err = self.distort(xy) - xy_d
            converged = np.max(np.abs(err), axis=-1) <= tol * (1.0 + np.max(np.abs(xy_d), axis=-1))
            if np.all(converged):
                break
            step = np.linalg.solve(self.distort_jacobian(xy), err[..., None])[..., 0]
            xy = xy - step
        else:
            err = self.distort(xy) - xy_d
            converged = np.max(np.abs(err), axis=-1) <= 1e-12
        return xy, converged

    def project(self, p_c):
        """Pixel coordinates of camera-frame points ``(..., 3)``."""
        p_c = np.asarray(p_c, dtype=float)
        xy = p_c[..., :2] / p_c[..., 2:3]
        xy_d = self.distort(xy)
        return np.stack([self.fx * xy_d[..., 0] + self.cx,
                         self.fy * xy_d[..., 1] + self.cy], axis=-1)

    def back_project_many(self, uv):
        """Bearings ``[x_n, y_n, 1]`` and a convergence mask for pixels ``(n, 2)``."""
        uv = np.asarray(uv, dtype=float)
        xy_d = np.stack([(uv[..., 0] - self.cx) / self.fx,
                         (uv[..., 1] - self.cy) / self.fy], axis=-1)
        xy, ok = self.undistort(xy_d)
        bearings = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
        return bearings, ok

    def in_image(self, uv):
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0.0) & (uv[..., 0] <= self.width - 1)
                & (uv[..., 1] >= 0.0) & (uv[..., 1] <= self.height - 1))


def back_project(u, intr: CameraIntrinsics):
    """Bearing ``[x_n, y_n, 1]`` of one raw pixel observation."""
    bearing, ok = intr.back_project_many(np.asarray(u, dtype=float)[None, :])
    if not ok[0]:
        raise UndistortionError(f"undistortion did not converge for pixel {u}")
    return bearing[0]
