import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texservo import geometry as geo
from texservo.errors import FrameError, GeometryError

angles = st.floats(-1.4, 1.4)  # keep pitch away from the gimbal singularity


class TestRotations:
    @pytest.mark.parametrize("fn", [geo.rot_x, geo.rot_y, geo.rot_z])
    def test_axis_rotations_orthonormal(self, fn):
        R = fn(0.7)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1.0) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(angles, angles, angles)
    def test_euler_roundtrip(self, rx, ry, rz):
        r = np.array([rx, ry, rz])
        np.testing.assert_allclose(geo.matrix_to_euler(geo.euler_to_matrix(r)), r, atol=1e-9)

    def test_euler_order_is_xyz(self):
        r = np.array([0.1, 0.2, 0.3])
        expected = geo.rot_x(0.1) @ geo.rot_y(0.2) @ geo.rot_z(0.3)
        np.testing.assert_allclose(geo.euler_to_matrix(r), expected, atol=1e-15)

    def test_gimbal_lock_raises(self):
        with pytest.raises(GeometryError):
            geo.matrix_to_euler(geo.rot_y(np.pi / 2))

    def test_check_rotation_rejects_scaled(self):
        with pytest.raises(FrameError):
            geo.check_rotation(2.0 * np.eye(3))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
    def test_rotvec_roundtrip(self, wx, wy, wz):
        w = np.array([wx, wy, wz])
        theta = np.linalg.norm(w)
        if theta >= np.pi - 1e-3:
            w *= (np.pi - 1e-3) / theta
        np.testing.assert_allclose(geo.matrix_to_rotvec(geo.rotvec_to_matrix(w)), w, atol=1e-8)

    def test_rotvec_small_angle_matches_first_order(self):
        w = np.array([1e-7, -2e-7, 3e-8])
        np.testing.assert_allclose(geo.rotvec_to_matrix(w), np.eye(3) + geo.skew(w), atol=1e-13)

    def test_rotvec_near_pi(self):
        w = (np.pi - 1e-8) * np.array([0.0, 0.0, 1.0])
        back = geo.matrix_to_rotvec(geo.rotvec_to_matrix(w))
        np.testing.assert_allclose(back, w, atol=1e-5)

    def test_skew_matches_cross_product(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(geo.skew(a) @ b, np.cross(a, b), atol=1e-14)
        np.testing.assert_allclose(geo.skew(a).T, -geo.skew(a), atol=0)


class TestPose6:
    def test_vector_roundtrip(self):
        q = np.array([1.0, -2.0, 3.0, 0.1, -0.2, 0.3])
        np.testing.assert_array_equal(geo.Pose6.from_vector(q).as_vector(), q)

    def test_matrix_roundtrip(self):
        p = geo.Pose6([10.0, -5.0, 2.0], [0.2, -0.3, 0.5])
        back = geo.Pose6.from_matrix(p.to_matrix())
        np.testing.assert_allclose(back.as_vector(), p.as_vector(), atol=1e-12)

    def test_compose_with_inverse_is_identity(self):
        p = geo.Pose6([3.0, 4.0, -1.0], [0.4, 0.1, -0.6])
        ident = p.compose(p.inverse())
        np.testing.assert_allclose(ident.as_vector(), np.zeros(6), atol=1e-12)

    def test_compose_matches_matrix_product(self):
        a = geo.Pose6([1.0, 2.0, 3.0], [0.1, 0.2, 0.3])
        b = geo.Pose6([-4.0, 0.5, 2.0], [-0.2, 0.05, 0.4])
        np.testing.assert_allclose(a.compose(b).to_matrix(),
                                   a.to_matrix() @ b.to_matrix(), atol=1e-12)

    def test_invert_transform(self):
        T = geo.transform_from(geo.euler_to_matrix([0.3, -0.2, 0.7]), [5.0, -2.0, 1.0])
        np.testing.assert_allclose(geo.invert_transform(T) @ T, np.eye(4), atol=1e-12)


class TestDiffRanges:
    def test_normalize_endpoints(self):
        rng = geo.DiffRanges()
        span = rng.span()
        np.testing.assert_allclose(rng.normalize(-span), np.zeros(6))
        np.testing.assert_allclose(rng.normalize(span), np.ones(6))
        np.testing.assert_allclose(rng.normalize(np.zeros(6)), np.full(6, 0.5))

    def test_roundtrip(self):
        rng = geo.DiffRanges(t_max=15.0, r_max=0.2)
        diff = np.array([3.0, -7.5, 0.0, 0.1, -0.05, 0.15])
        np.testing.assert_allclose(rng.denormalize(rng.normalize(diff)), diff, atol=1e-12)


class TestPoseDifference:
    def test_identical_poses_zero(self):
        q = geo.Pose6([1.0, 2.0, 3.0], [0.1, 0.2, 0.3])
        np.testing.assert_allclose(geo.pose_difference(q, q), np.zeros(6), atol=1e-12)

    def test_pure_yaw_offset(self):
        r_a = np.array([0.0, 0.0, 0.25])
        r_b = np.array([0.0, 0.0, 0.10])
        np.testing.assert_allclose(geo.rotation_difference(r_a, r_b),
                                   [0.0, 0.0, 0.15], atol=1e-12)

    def test_matrix_based_not_componentwise(self):
        # with mixed axes the matrix difference differs from naive subtraction
        r_a = np.array([0.3, 0.2, 0.1])
        r_b = np.array([0.1, 0.0, 0.3])
        diff = geo.rotation_difference(r_a, r_b)
        assert np.linalg.norm(diff - (r_a - r_b)) > 1e-3
        np.testing.assert_allclose(
            geo.euler_to_matrix(diff) @ geo.euler_to_matrix(r_b),
            geo.euler_to_matrix(r_a), atol=1e-12)
