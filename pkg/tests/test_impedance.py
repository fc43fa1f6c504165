import numpy as np
import pytest

from texservo import impedance as imp
from texservo import servo as sv
from texservo.errors import ConfigError, ContractError
from texservo.geometry import FrameGraph, euler_to_matrix, transform_from


def frames_with_offsets(d=95.0, yaw1=0.0, yaw2=0.0):
    return FrameGraph(
        object_from_e1=transform_from(euler_to_matrix([0, 0, yaw1]), [-d, 0.0, 0.0]),
        object_from_e2=transform_from(euler_to_matrix([0, 0, yaw2]), [d, 0.0, 0.0]))


class TestParams:
    def test_zero_inertia_on_selected_axis_rejected(self):
        with pytest.raises(ConfigError):
            imp.ImpedanceParams(m=[0, 1, 1, 1, 1, 1], d=np.ones(6), k=np.zeros(6),
                                s=[1, 0, 0, 0, 0, 0], f_desired=np.zeros(6)).validate()

    def test_selection_must_be_binary(self):
        with pytest.raises(ConfigError):
            imp.ImpedanceParams(m=np.ones(6), d=np.ones(6), k=np.zeros(6),
                                s=[0.5, 0, 0, 0, 0, 0], f_desired=np.zeros(6)).validate()

    def test_default_selections(self):
        np.testing.assert_array_equal(imp.external_params().s, [0, 0, 1, 1, 1, 0])
        np.testing.assert_array_equal(imp.internal_params().s, [1, 0, 0, 0, 0, 0])


class TestExternalWrench:
    def test_zero_in_zero_out(self):
        out = imp.external_wrench(np.zeros(6), np.zeros(6), frames_with_offsets())
        np.testing.assert_array_equal(out, np.zeros(6))

    def test_symmetric_downward_forces(self):
        f = np.array([0.0, 0.0, -1.5, 0.0, 0.0, 0.0])
        out = imp.external_wrench(f, f, frames_with_offsets(d=40.0))
        np.testing.assert_allclose(out[:3], [0.0, 0.0, -3.0], atol=1e-12)
        np.testing.assert_allclose(out[3:], np.zeros(3), atol=1e-12)

    def test_single_force_lever_arm_torque(self):
        # f_z on the effector at +d along x: torque_y = -d * f_z
        d, fz = 40.0, 2.0
        f2 = np.array([0.0, 0.0, fz, 0.0, 0.0, 0.0])
        out = imp.external_wrench(np.zeros(6), f2, frames_with_offsets(d=d))
        np.testing.assert_allclose(out, [0, 0, fz, 0, -d * fz, 0], atol=1e-12)

    def test_effector_frame_rotation_applied(self):
        # effector 2 frame yawed 90 deg: its local x force points along
        # object y
        frames = frames_with_offsets(d=10.0, yaw2=np.pi / 2)
        f2 = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        out = imp.external_wrench(np.zeros(6), f2, frames)
        np.testing.assert_allclose(out[:3], [0.0, 1.0, 0.0], atol=1e-12)


class TestInternalWrench:
    def test_opposite_pulls_give_tension(self):
        f = 3.0
        f_e1 = np.array([-f, 0, 0, 0, 0, 0])
        f_e2 = np.array([f, 0, 0, 0, 0, 0])
        frames = frames_with_offsets()
        out = imp.internal_wrench(f_e1, f_e2, frames)
        assert out[0] == pytest.approx(f)
        # and the same pair carries no net external force
        np.testing.assert_allclose(imp.external_wrench(f_e1, f_e2, frames)[:3],
                                   np.zeros(3), atol=1e-12)

    def test_identical_wrenches_cancel(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=6)
        out = imp.internal_wrench(f, f, frames_with_offsets())
        np.testing.assert_allclose(out, np.zeros(6), atol=1e-12)

    def test_zero_in_zero_out(self):
        out = imp.internal_wrench(np.zeros(6), np.zeros(6), frames_with_offsets())
        np.testing.assert_array_equal(out, np.zeros(6))


class TestImpedanceStep:
    def test_equilibrium_stays_exactly_zero(self):
        params = imp.external_params()
        state = imp.VirtualState()
        for _ in range(100):
            state = imp.impedance_step(state, params, params.f_desired, 1e-3)
        np.testing.assert_array_equal(state.dq, np.zeros(6))
        np.testing.assert_array_equal(state.dqd, np.zeros(6))

    def test_external_steady_state_displacement(self):
        # analytic steady state: dq = (F - F_d) / K on selected axes
        params = imp.external_params(fz_desired=2.0, m=1.0, dmp=1.0, k=0.5)
        f = np.array([0.0, 0.0, 3.0, 0.0, 0.0, 0.0])
        state = imp.VirtualState()
        for _ in range(60000):
            state = imp.impedance_step(state, params, f, 1e-3)
        assert abs(state.dq[2] - (3.0 - 2.0) / 0.5) < 1e-6
        assert abs(state.dqd[2]) < 1e-6

    def test_internal_steady_state_velocity(self):
        # no stiffness: velocity settles to (F - F_d) / D, displacement ramps
        params = imp.internal_params(tension=3.0, m=1.0, dmp=5.0)
        f = np.array([-1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        state = imp.VirtualState()
        for _ in range(20000):
            state = imp.impedance_step(state, params, f, 1e-3)
        assert state.dqd[0] == pytest.approx((-1.0 + 3.0) / 5.0, abs=1e-6)
        before = state.dq[0]
        state = imp.impedance_step(state, params, f, 1e-3)
        assert state.dq[0] - before == pytest.approx(state.dqd[0] * 1e-3, abs=1e-12)

    def test_unselected_axes_bit_exact_zero(self):
        rng = np.random.default_rng(1)
        params = imp.external_params()
        state = imp.VirtualState()
        for _ in range(500):
            state = imp.impedance_step(state, params, rng.normal(size=6) * 10, 1e-3)
        unsel = params.s == 0.0
        assert np.all(state.dq[unsel] == 0.0)
        assert np.all(state.dqd[unsel] == 0.0)

    def test_lyapunov_nonincreasing_at_setpoint(self):
        params = imp.external_params(m=1.0, dmp=5.0, k=0.5)
        state = imp.VirtualState(dq=np.array([0, 0, 4.0, 0.2, -0.3, 0]),
                                 dqd=np.array([0, 0, -1.0, 0.1, 0.2, 0]))

        def lyapunov(s):
            return 0.5 * float(s.dqd @ (params.m * s.dqd) + s.dq @ (params.k * s.dq))

        prev = lyapunov(state)
        for _ in range(10000):
            state = imp.impedance_step(state, params, params.f_desired, 1e-3)
            cur = lyapunov(state)
            assert cur <= prev + 1e-15
            prev = cur


class TestDistribute:
    def test_internal_changes_separation_only(self):
        frames = frames_with_offsets()
        d1, d2 = imp.distribute_displacement(np.zeros(6), [2.0, 0, 0, 0, 0, 0], frames)
        np.testing.assert_allclose(d2[:3] - d1[:3], [2.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(d1[:3] + d2[:3], np.zeros(3), atol=1e-12)

    def test_external_common_mode(self):
        frames = frames_with_offsets()
        d1, d2 = imp.distribute_displacement([0, 0, -1.0, 0, 0, 0], np.zeros(6), frames)
        np.testing.assert_allclose(d1, d2, atol=0)
        np.testing.assert_allclose(d1[:3], [0.0, 0.0, -1.0], atol=1e-12)

    def test_zero_to_zero(self):
        d1, d2 = imp.distribute_displacement(np.zeros(6), np.zeros(6),
                                             frames_with_offsets())
        np.testing.assert_array_equal(d1, np.zeros(6))
        np.testing.assert_array_equal(d2, np.zeros(6))

    def test_object_yaw_rotates_axes(self):
        frames = frames_with_offsets()
        frames.world_from_object = transform_from(
            euler_to_matrix([0, 0, np.pi / 2]), [0.0, 0.0, 0.0])
        d1, d2 = imp.distribute_displacement(np.zeros(6), [2.0, 0, 0, 0, 0, 0], frames)
        np.testing.assert_allclose(d2[:3] - d1[:3], [0.0, 2.0, 0.0], atol=1e-12)


class TestComposeDesired:
    def test_zero_displacements_identity(self):
        from texservo.geometry import Pose6
        ref = Pose6([1.0, 2.0, 3.0], [0.1, -0.2, 0.3])
        out = imp.compose_desired(ref, np.zeros(6), np.zeros(6))
        np.testing.assert_allclose(out.as_vector(), ref.as_vector(), atol=1e-12)

    def test_translations_add_exactly(self):
        from texservo.geometry import Pose6
        ref = Pose6([1.0, 0.0, 5.0], [0.0, 0.0, 0.0])
        out = imp.compose_desired(ref, [0.25, 0, -1.0, 0, 0, 0], [0.5, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(out.t, [1.75, 0.0, 4.0])

    def test_translation_order_commutes(self):
        from texservo.geometry import Pose6
        ref = Pose6()
        a = np.array([0.3, -0.2, 0.1, 0, 0, 0])
        b = np.array([-0.5, 0.4, 0.2, 0, 0, 0])
        np.testing.assert_array_equal(imp.compose_desired(ref, a, b).t,
                                      imp.compose_desired(ref, b, a).t)


class TestAxisPartition:
    def test_default_configuration_valid(self):
        assert imp.validate_axis_partition(sv.GainMatrix(), imp.external_params(),
                                           imp.internal_params())

    def test_double_driven_axis_rejected(self):
        with pytest.raises(ContractError):
            imp.validate_axis_partition(sv.GainMatrix(ltz=0.3), imp.external_params(),
                                        imp.internal_params())

    def test_undriven_axis_rejected(self):
        with pytest.raises(ContractError):
            imp.validate_axis_partition(sv.GainMatrix(lrz=0.0), imp.external_params(),
                                        imp.internal_params())

    def test_internal_overlapping_external_rejected(self):
        bad = imp.internal_params()
        bad.s = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
        with pytest.raises(ContractError):
            imp.validate_axis_partition(sv.GainMatrix(), imp.external_params(), bad)
