"""Visual-servoing control law: gain matrix, camera-to-world twist
transform, reference-pose integration on the rotation manifold, and the
object-to-effector reference mapping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FrameError
from .geometry import (FrameGraph, Pose6, euler_to_matrix, matrix_to_euler,
                       rotvec_to_matrix)


@dataclass
class GainMatrix:
    """Diagonal proportional gains [1/s].  The z, roll and pitch entries are
    zero by default: those axes are ceded to the force controllers."""

    ltx: float = 0.3
    lty: float = 0.3
    ltz: float = 0.0
    lrx: float = 0.0
    lry: float = 0.0
    lrz: float = 0.3

    def vector(self):
        return np.array([self.ltx, self.lty, self.ltz, self.lrx, self.lry, self.lrz])

    def validate(self):
        if np.any(self.vector() < 0.0):
            raise ConfigError("servo gains must be nonnegative")
        return self

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GainMatrix keys: {sorted(unknown)}")
        return cls(**d).validate()


def control_law(pose_diff, gains: GainMatrix):
    """Proportional velocity command: v = -gain * diff, componentwise.
    ``pose_diff`` must be denormalized [mm, rad].  Zero-gain axes yield an
    exact 0.0 regardless of the diff."""
    diff = np.asarray(pose_diff, dtype=np.float64).reshape(6)
    g = gains.validate().vector()
    v = -(g * diff)
    v[g == 0.0] = 0.0
    return v


def twist_camera_to_world(v, frames: FrameGraph):
    """Rotate the linear and angular velocity parts into the world frame."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    R = frames.camera_rotation()   # validates orthonormality
    return np.concatenate([R @ v[:3], R @ v[3:]])


def integrate_reference(ref: Pose6, v_world, period):
    """One explicit integration step of the reference pose: translation by
    v_t * T, rotation by the exponential of v_r * T composed on the left
    (world-frame increment)."""
    if period <= 0.0:
        raise ConfigError("control period must be positive")
    v = np.asarray(v_world, dtype=np.float64).reshape(6)
    t = ref.t + v[:3] * period
    R = rotvec_to_matrix(v[3:] * period) @ euler_to_matrix(ref.r)
    return Pose6(t, matrix_to_euler(R))


def object_to_effector_refs(q_obj_ref: Pose6, frames: FrameGraph):
    """Rigid composition of the object reference with the fixed
    object-to-effector transforms."""
    if frames.object_from_e1 is None or frames.object_from_e2 is None:
        raise FrameError("frame graph is missing an object-to-effector transform")
    T = q_obj_ref.to_matrix()
    return (Pose6.from_matrix(T @ frames.object_from_e1),
            Pose6.from_matrix(T @ frames.object_from_e2))
