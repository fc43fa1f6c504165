"""Dual-arm force control: equivalent external / internal wrench
computation at the shared object frame, virtual mass-spring-damper
integration with axis selection, and displacement distribution onto the
two effectors.

Wrench sign convention: measured wrenches are the forces the environment
exerts on each effector (sensor/reaction convention), expressed in that
effector's frame.  Pressing down on the table therefore reads as a
positive z force and stretched fabric reads as a pull toward the other
effector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FrameError
from .geometry import (FrameGraph, Pose6, check_rotation, euler_to_matrix,
                       matrix_to_euler, rotvec_to_matrix)

AXES = ("x", "y", "z", "rx", "ry", "rz")


@dataclass
class ImpedanceParams:
    m: np.ndarray                       # virtual inertia diagonal
    d: np.ndarray                       # damping diagonal
    k: np.ndarray                       # stiffness diagonal (zero: integrator)
    s: np.ndarray                       # selection diagonal (0/1)
    f_desired: np.ndarray               # wrench setpoint

    def __post_init__(self):
        for name in ("m", "d", "k", "s", "f_desired"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(6))

    def validate(self):
        sel = self.s != 0.0
        if not np.all(np.isin(self.s, (0.0, 1.0))):
            raise ConfigError("selection matrix entries must be 0 or 1")
        if np.any(self.m[sel] <= 0.0):
            raise ConfigError("zero or negative inertia on a selected axis")
        if np.any(self.d[sel] <= 0.0):
            raise ConfigError("damping must be positive on selected axes")
        if np.any(self.k < 0.0):
            raise ConfigError("stiffness must be nonnegative")
        return self

    def to_dict(self):
        return {n: list(getattr(self, n)) for n in ("m", "d", "k", "s", "f_desired")}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"m", "d", "k", "s", "f_desired"}
        if unknown:
            raise ConfigError(f"unknown ImpedanceParams keys: {sorted(unknown)}")
        return cls(**d).validate()


def external_params(fz_desired=2.0, m=1.0, dmp=5.0, k=0.5):
    """Defaults for the net-wrench controller: regulates z force and keeps
    roll/pitch level.  ``fz_desired`` is the upward table reaction [N]
    corresponding to pressing down with that force."""
    s = np.array([0.0, 0.0, 1.0, 1.0, 1.0, 0.0])
    f_d = np.array([0.0, 0.0, fz_desired, 0.0, 0.0, 0.0])
    return ImpedanceParams(np.full(6, m), np.full(6, dmp), np.full(6, k), s, f_d).validate()


def internal_params(tension=3.0, m=1.0, dmp=5.0):
    """Defaults for the fabric-tension controller.  A stretched fabric pulls
    the effectors toward each other, which reads as a negative internal x
    force under the reaction convention, so the setpoint is -tension."""
    s = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    f_d = np.array([-tension, 0.0, 0.0, 0.0, 0.0, 0.0])
    return ImpedanceParams(np.full(6, m), np.full(6, dmp), np.zeros(6), s, f_d).validate()


@dataclass
class VirtualState:
    dq: np.ndarray = field(default_factory=lambda: np.zeros(6))
    dqd: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def copy(self):
        return VirtualState(self.dq.copy(), self.dqd.copy())


def _effector_rotations(frames: FrameGraph):
    if frames.object_from_e1 is None or frames.object_from_e2 is None:
        raise FrameError("frame graph is missing an object-to-effector transform")
    return (check_rotation(frames.object_from_e1[:3, :3]),
            check_rotation(frames.object_from_e2[:3, :3]))


def external_wrench(f_e1, f_e2, frames: FrameGraph):
    """Net equivalent wrench at the object/external frame origin: rotated
    forces summed, torques summed with lever-arm cross products."""
    f_e1 = np.asarray(f_e1, dtype=np.float64).reshape(6)
    f_e2 = np.asarray(f_e2, dtype=np.float64).reshape(6)
    R1, R2 = _effector_rotations(frames)
    r1 = frames.object_from_e1[:3, 3]
    r2 = frames.object_from_e2[:3, 3]
    F1, F2 = R1 @ f_e1[:3], R2 @ f_e2[:3]
    tau = R1 @ f_e1[3:] + R2 @ f_e2[3:] + np.cross(r1, F1) + np.cross(r2, F2)
    return np.concatenate([F1 + F2, tau])


def internal_wrench(f_e1, f_e2, frames: FrameGraph):
    """Antisymmetric half-difference of the rotated effector wrenches; its
    x-component is the tension along the effector-to-effector axis."""
    f_e1 = np.asarray(f_e1, dtype=np.float64).reshape(6)
    f_e2 = np.asarray(f_e2, dtype=np.float64).reshape(6)
    R1, R2 = _effector_rotations(frames)
    return 0.5 * np.concatenate([R2 @ f_e2[:3] - R1 @ f_e1[:3],
                                 R2 @ f_e2[3:] - R1 @ f_e1[3:]])


def impedance_step(state: VirtualState, params: ImpedanceParams, f_measured, dt):
    """Semi-implicit Euler update of the virtual dynamics.  Unselected axes
    are never touched, so they stay bit-exactly zero."""
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    params.validate()
    f = np.asarray(f_measured, dtype=np.float64).reshape(6)
    sel = params.s != 0.0
    out = state.copy()
    acc = (params.s[sel] * (f[sel] - params.f_desired[sel])
           - params.d[sel] * state.dqd[sel]
           - params.k[sel] * state.dq[sel]) / params.m[sel]
    out.dqd[sel] = state.dqd[sel] + acc * dt
    out.dq[sel] = state.dq[sel] + out.dqd[sel] * dt
    return out


def distribute_displacement(dq_ext, dq_int, frames: FrameGraph):
    """Map the two virtual displacements (object axes) to world-frame
    effector displacements: external is common-mode, internal is applied
    antisymmetrically (effector 2 gets +half, effector 1 -half)."""
    dq_ext = np.asarray(dq_ext, dtype=np.float64).reshape(6)
    dq_int = np.asarray(dq_int, dtype=np.float64).reshape(6)
    R = frames.object_rotation()
    common_t, common_r = R @ dq_ext[:3], R @ dq_ext[3:]
    half_t, half_r = 0.5 * (R @ dq_int[:3]), 0.5 * (R @ dq_int[3:])
    d1 = np.concatenate([common_t - half_t, common_r - half_r])
    d2 = np.concatenate([common_t + half_t, common_r + half_r])
    return d1, d2


def compose_desired(ref_e: Pose6, d_ext, d_int):
    """Desired effector pose: reference plus both displacement terms.
    Translations add exactly; rotations compose as world-frame exponential
    increments (the displacement angles are small)."""
    d_ext = np.asarray(d_ext, dtype=np.float64).reshape(6)
    d_int = np.asarray(d_int, dtype=np.float64).reshape(6)
    t = ref_e.t + d_ext[:3] + d_int[:3]
    R = (rotvec_to_matrix(d_ext[3:]) @ rotvec_to_matrix(d_int[3:])
         @ euler_to_matrix(ref_e.r))
    return Pose6(t, matrix_to_euler(R))


def validate_axis_partition(gains, ext: ImpedanceParams, internal: ImpedanceParams):
    """Each absolute object axis must be driven by exactly one of the vision
    and external-force controllers; the internal controller acts on relative
    coordinates and must not overlap the external selection."""
    vision = set(np.flatnonzero(gains.vector() > 0.0))
    external = set(np.flatnonzero(ext.s != 0.0))
    if vision & external:
        both = sorted(AXES[i] for i in vision & external)
        raise ContractError(f"axes driven by two controllers: {both}")
    if vision | external != set(range(6)):
        free = sorted(AXES[i] for i in set(range(6)) - (vision | external))
        raise ContractError(f"axes driven by no controller: {free}")
    internal_sel = set(np.flatnonzero(internal.s != 0.0))
    if not internal_sel:
        raise ContractError("internal controller selects no axis")
    if internal_sel & external:
        both = sorted(AXES[i] for i in internal_sel & external)
        raise ContractError(f"internal selection overlaps external axes: {both}")
    return True
