import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slvba.geometry import (
    CameraIntrinsics,
    Extrinsics,
    Pose,
    UndistortionError,
    back_project,
    gravity_vector,
    imu_pose_to_camera_pose,
    quat_boxminus,
    quat_boxplus,
    quat_exp,
    quat_from_rotvec,
    quat_identity,
    quat_log,
    quat_mul,
    quat_to_rot,
    right_jacobian,
    right_jacobian_batch,
    right_jacobian_inv,
    rot_from_euler_zyx,
    euler_zyx,
    rot_to_quat,
    so3_exp,
    transform_point,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
unit_quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(
    lambda q: np.linalg.norm(q) > 0.1).map(lambda q: q / np.linalg.norm(q))


def tangent(max_norm):
    return vec3.filter(lambda v: 1e-12 < np.linalg.norm(v)).map(
        lambda v: v / np.linalg.norm(v) * (np.linalg.norm(v) % max_norm))


def same_rotation(q1, q2, tol=1e-9):
    return min(np.abs(q1 - q2).max(), np.abs(q1 + q2).max()) < tol


class TestBoxplus:
    def test_zero_increment(self):
        np.testing.assert_array_equal(quat_boxplus(quat_identity(), np.zeros(3)), quat_identity())

    def test_half_turn_about_x(self):
        np.testing.assert_allclose(quat_boxplus(quat_identity(), [np.pi, 0, 0]),
                                   [0, 1, 0, 0], atol=1e-15)

    def test_tiny_increment_uses_series(self):
        q = quat_boxplus(quat_identity(), [1e-10, 0, 0])
        assert np.isfinite(q).all()
        assert abs(np.linalg.norm(q) - 1) < 1e-15

    @given(unit_quats, tangent(np.pi - 1e-6))
    def test_round_trip(self, q, d):
        np.testing.assert_allclose(quat_boxminus(quat_boxplus(q, d), q), d, atol=1e-9)

    @given(unit_quats, vec3)
    def test_result_is_unit(self, q, d):
        assert abs(np.linalg.norm(quat_boxplus(q, d)) - 1) < 1e-9


class TestBoxminus:
    def test_self_difference(self):
        q = quat_from_rotvec([0.3, -0.2, 1.0])
        np.testing.assert_allclose(quat_boxminus(q, q), 0, atol=1e-15)

    def test_half_turn_log(self):
        np.testing.assert_allclose(quat_boxminus(np.array([0.0, 1, 0, 0]), quat_identity()),
                                   [np.pi, 0, 0], atol=1e-15)

    @given(unit_quats, unit_quats)
    def test_shortest_geodesic(self, q1, q2):
        assert np.linalg.norm(quat_boxminus(q1, q2)) <= np.pi + 1e-12

    @given(unit_quats)
    def test_sign_invariant(self, q):
        p = quat_from_rotvec([0.1, 0.2, 0.3])
        np.testing.assert_allclose(quat_boxminus(q, p), quat_boxminus(-q, p), atol=1e-12)


@given(tangent(np.pi / 2 - 1e-6))
def test_exp_log_inverse(v):
    np.testing.assert_allclose(quat_log(quat_exp(v)), v, atol=1e-9)


@given(unit_quats)
def test_log_exp_inverse_up_to_sign(q):
    assert same_rotation(quat_exp(quat_log(q)), q)


@given(unit_quats)
def test_rotation_matrix_orthonormal(q):
    R = quat_to_rot(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


@given(unit_quats)
def test_matrix_quaternion_round_trip(q):
    assert same_rotation(rot_to_quat(quat_to_rot(q)), q)


@given(tangent(3.0))
def test_exp_matches_quaternion(phi):
    np.testing.assert_allclose(so3_exp(phi), quat_to_rot(quat_from_rotvec(phi)), atol=1e-12)


@given(tangent(3.0))
def test_right_jacobian_inverse(phi):
    np.testing.assert_allclose(right_jacobian(phi) @ right_jacobian_inv(phi), np.eye(3),
                               atol=1e-9)


def test_right_jacobian_definition(rng):
    phi = rng.normal(size=3)
    d = 1e-7 * rng.normal(size=3)
    lhs = so3_exp(phi + d)
    rhs = so3_exp(phi) @ so3_exp(right_jacobian(phi) @ d)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_batched_jacobians_match(rng):
    phi = np.vstack([rng.normal(size=(5, 3)), np.zeros((1, 3)), 1e-7 * np.ones((1, 3))])
    Jb = right_jacobian_batch(phi)
    Jib = right_jacobian_batch(phi, inverse=True)
    for k, p in enumerate(phi):
        np.testing.assert_allclose(Jb[k], right_jacobian(p), atol=1e-14)
        np.testing.assert_allclose(Jib[k], right_jacobian_inv(p), atol=1e-14)


def test_euler_round_trip():
    R = rot_from_euler_zyx(0.7, -0.3, 0.2)
    np.testing.assert_allclose(euler_zyx(R), (0.7, -0.3, 0.2), atol=1e-14)


def test_gravity_points_down():
    np.testing.assert_array_equal(gravity_vector(), [0, 0, -9.81])
    assert np.linalg.norm(gravity_vector(3.71)) == 3.71


class TestTransformPoint:
    def test_identity(self):
        np.testing.assert_array_equal(transform_point(Pose(), [1, 2, 3]), [1, 2, 3])

    def test_quarter_turn_about_z(self):
        pose = Pose(quat_from_rotvec([0, 0, np.pi / 2]), np.zeros(3))
        np.testing.assert_allclose(transform_point(pose, [1, 0, 0]), [0, 1, 0], atol=1e-15)

    def test_inverse_round_trip(self, rng):
        pose = Pose(quat_from_rotvec(rng.normal(size=3)), rng.normal(size=3))
        p = rng.normal(size=3)
        back = transform_point(pose.inverse(), transform_point(pose, p))
        np.testing.assert_allclose(back, p, atol=1e-12)

    def test_pose_times_inverse_is_identity(self, rng):
        pose = Pose(quat_from_rotvec(rng.normal(size=3)), rng.normal(size=3))
        ident = pose @ pose.inverse()
        assert same_rotation(ident.rotation, quat_identity())
        np.testing.assert_allclose(ident.position, 0, atol=1e-9)

    @given(unit_quats, vec3, unit_quats, vec3, vec3)
    def test_chain_associativity(self, q1, t1, q2, t2, p):
        a, b = Pose(q1, t1), Pose(q2, t2)
        np.testing.assert_allclose(transform_point(a @ b, p),
                                   transform_point(a, transform_point(b, p)), atol=1e-10)


class TestImuToCamera:
    def test_identity(self):
        cam = imu_pose_to_camera_pose(Pose(), Extrinsics())
        np.testing.assert_array_equal(cam.rotation, quat_identity())
        np.testing.assert_array_equal(cam.position, np.zeros(3))

    def test_translation_only(self):
        cam = imu_pose_to_camera_pose(Pose(), Extrinsics(translation=np.array([0.1, 0, 0])))
        np.testing.assert_allclose(cam.position, [0.1, 0, 0])

    def test_half_turn_flips_offset(self):
        imu = Pose(quat_from_rotvec([0, 0, np.pi]), np.zeros(3))
        cam = imu_pose_to_camera_pose(imu, Extrinsics(translation=np.array([0.1, 0, 0])))
        np.testing.assert_allclose(cam.position, [-0.1, 0, 0], atol=1e-15)

    def test_rotation_chain(self, rng):
        imu = Pose(quat_from_rotvec(rng.normal(size=3)), rng.normal(size=3))
        ext = Extrinsics(quat_from_rotvec(rng.normal(size=3)), rng.normal(size=3))
        cam = imu_pose_to_camera_pose(imu, ext)
        np.testing.assert_allclose(cam.R, imu.R @ ext.R, atol=1e-12)


class TestBackProject:
    def test_principal_point(self):
        intr = CameraIntrinsics(400, 400, 320, 240)
        np.testing.assert_array_equal(back_project([320, 240], intr), [0, 0, 1])

    def test_pinhole_inversion(self):
        intr = CameraIntrinsics(100, 100, 0, 0)
        np.testing.assert_allclose(back_project([100, 0], intr), [1, 0, 1])

    def test_pixel_round_trip_euroc(self, rng):
        intr = CameraIntrinsics.euroc()
        uv = rng.uniform([0, 0], [intr.width - 1, intr.height - 1], size=(500, 2))
        bearings, ok = intr.back_project_many(uv)
        assert ok.all()
        assert np.abs(intr.project(bearings) - uv).max() < 1e-6

    def test_project_then_back_project(self, rng):
        intr = CameraIntrinsics.euroc()
        xy = rng.uniform(-0.6, 0.6, size=(200, 2))
        b, ok = intr.back_project_many(intr.project(np.c_[xy, np.ones(200)]))
        assert ok.all()
        assert np.abs(b[:, :2] - xy).max() < 1e-8

    def test_non_convergent_pixel_rejected(self):
        # k1 = -2 folds the distortion curve; far pixels have no preimage
        intr = CameraIntrinsics(100, 100, 0, 0, k1=-2.0)
        with pytest.raises(UndistortionError):
            back_project([500, 500], intr)


@given(st.floats(0, np.deg2rad(60)), st.floats(0, 2 * np.pi))
def test_undistort_inverts_distort_within_60_degrees(angle, azimuth):
    intr = CameraIntrinsics.euroc()
    r = np.tan(angle)
    xy = np.array([r * np.cos(azimuth), r * np.sin(azimuth)])
    rec, ok = intr.undistort(intr.distort(xy))
    assert ok
    assert np.abs(rec - xy).max() < 1e-8


def test_quaternion_product_matches_matrices(rng):
    a, b = quat_from_rotvec(rng.normal(size=3)), quat_from_rotvec(rng.normal(size=3))
    np.testing.assert_allclose(quat_to_rot(quat_mul(a, b)), quat_to_rot(a) @ quat_to_rot(b),
                               atol=1e-12)
