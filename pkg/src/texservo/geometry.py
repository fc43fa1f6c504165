"""Rigid-body math: XYZ-Euler poses, rotation maps, frames, label ranges.

Convention: XYZ Euler means R = Rx(rx) @ Ry(ry) @ Rz(rz).  Translations are
millimeters, rotations radians, everywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FrameError, GeometryError

GIMBAL_TOL = 1e-9


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(r):
    rx, ry, rz = np.asarray(r, dtype=np.float64)
    return rot_x(rx) @ rot_y(ry) @ rot_z(rz)


def matrix_to_euler(R):
    """Extract XYZ Euler angles; raises on gimbal lock (|pitch| = pi/2)."""
    R = np.asarray(R, dtype=np.float64)
    sy = R[0, 2]
    if abs(abs(sy) - 1.0) < GIMBAL_TOL:
        raise GeometryError("degenerate orientation: |pitch| = pi/2 (gimbal lock)")
    ry = np.arcsin(np.clip(sy, -1.0, 1.0))
    rx = np.arctan2(-R[1, 2], R[2, 2])
    rz = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([rx, ry, rz])


def check_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or np.linalg.norm(R.T @ R - np.eye(3)) > tol:
        raise FrameError("matrix is not a valid rotation")
    return R


def rotvec_to_matrix(w):
    """Exponential map (Rodrigues) of a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K + 0.5 * K @ K
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def matrix_to_rotvec(R):
    """Log map; inverse of :func:`rotvec_to_matrix` for angles < pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    axis_raw = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * axis_raw
    if np.pi - theta < 1e-6:
        # near-pi fallback via the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        axis *= np.sign(axis_raw + (axis_raw == 0.0))
        axis /= max(np.linalg.norm(axis), 1e-12)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * axis_raw


def skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


@dataclass
class Pose6:
    """3-vector translation [mm] stacked with an XYZ-Euler rotation [rad]."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3).copy()

    def as_vector(self):
        return np.concatenate([self.t, self.r])

    @classmethod
    def from_vector(cls, q):
        q = np.asarray(q, dtype=np.float64).reshape(6)
        return cls(q[:3], q[3:])

    def to_matrix(self):
        T = np.eye(4)
        T[:3, :3] = euler_to_matrix(self.r)
        T[:3, 3] = self.t
        return T

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, 3], matrix_to_euler(T[:3, :3]))

    def compose(self, other: "Pose6") -> "Pose6":
        return Pose6.from_matrix(self.to_matrix() @ other.to_matrix())

    def inverse(self) -> "Pose6":
        R = euler_to_matrix(self.r)
        return Pose6(-R.T @ self.t, matrix_to_euler(R.T))

    def copy(self) -> "Pose6":
        return Pose6(self.t.copy(), self.r.copy())


def invert_transform(T):
    T = np.asarray(T, dtype=np.float64)
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def transform_from(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = np.asarray(t, dtype=np.float64)
    return T


@dataclass
class FrameGraph:
    """Homogeneous transforms tying world, camera, object and effectors.

    ``world_from_object`` is the live object pose; the object frame sits at
    the effector midpoint with x pointing from effector 1 to effector 2 and
    z aligned with the world z.  The internal and external force frames
    coincide with the object frame.
    """

    world_from_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    object_from_e1: np.ndarray = field(default_factory=lambda: np.eye(4))
    object_from_e2: np.ndarray = field(default_factory=lambda: np.eye(4))
    world_from_object: np.ndarray = field(default_factory=lambda: np.eye(4))
    world_from_base1: np.ndarray | None = None
    world_from_base2: np.ndarray | None = None

    def camera_rotation(self):
        return check_rotation(self.world_from_camera[:3, :3])

    def object_rotation(self):
        return check_rotation(self.world_from_object[:3, :3])


@dataclass(frozen=True)
class DiffRanges:
    """Symmetric min-max ranges used to map pose differences into [0, 1]^6."""

    t_max: float = 20.0            # mm per translation axis
    r_max: float = np.deg2rad(10)  # rad per rotation axis

    def span(self):
        return np.array([self.t_max] * 3 + [self.r_max] * 3)

    def normalize(self, diff6):
        diff6 = np.asarray(diff6, dtype=np.float64).reshape(6)
        s = self.span()
        # zero-width axes carry no information; park them at mid-range
        out = np.full(6, 0.5)
        live = s > 0.0
        out[live] = (diff6[live] + s[live]) / (2.0 * s[live])
        return out

    def denormalize(self, n6):
        n6 = np.asarray(n6, dtype=np.float64).reshape(6)
        s = self.span()
        return n6 * (2.0 * s) - s


def rotation_difference(r_a, r_b):
    """Euler vector of R(r_a) @ R(r_b)^T (matrix-based, no raw subtraction)."""
    return matrix_to_euler(euler_to_matrix(r_a) @ euler_to_matrix(r_b).T)


def pose_difference(q: Pose6, q_star: Pose6):
    """6-vector [t_a - t_b, rotation_difference(r_a, r_b)]."""
    return np.concatenate([q.t - q_star.t, rotation_difference(q.r, q_star.r)])
