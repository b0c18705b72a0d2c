"""Six-dimensional spatial-vector algebra for rigid-body dynamics.

Conventions (fixed project-wide, asserted in tests):
- Plucker coordinates with the ANGULAR part first: a spatial motion vector
  is (omega, v), a spatial force vector is (torque, force).
- A transform maps coordinates from frame A to frame B as an affine map
  p_B = E @ p_A + r, kept factored as (rotation E, translation r).
  Equivalently, frame B sits at origin -E^T r with axis matrix E^T in A.
- Everything on the dynamics path is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

ROT_TOL = 1e-10


def _skew(v: Array) -> Array:
    """3x3 matrix S(v) with S(v) @ u == v x u."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def cross3(a: Array, b: Array) -> Array:
    """3-vector cross product; avoids np.cross's axis-handling overhead."""
    return np.array([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def _as_vec3(v) -> Array:
    return np.asarray(v, dtype=np.float64).reshape(3)


@dataclass(frozen=True)
class SpatialVector:
    """Spatial motion or force vector; the interpretation is the caller's."""

    angular: Array
    linear: Array

    def __post_init__(self):
        object.__setattr__(self, "angular", _as_vec3(self.angular))
        object.__setattr__(self, "linear", _as_vec3(self.linear))

    @staticmethod
    def _trusted(angular: Array, linear: Array) -> "SpatialVector":
        """Internal fast path: inputs are already float64 3-vectors."""
        sv = object.__new__(SpatialVector)
        object.__setattr__(sv, "angular", angular)
        object.__setattr__(sv, "linear", linear)
        return sv

    @staticmethod
    def zero() -> "SpatialVector":
        return SpatialVector(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_array(a: Array) -> "SpatialVector":
        a = np.asarray(a, dtype=np.float64).reshape(6)
        return SpatialVector(a[:3], a[3:])

    def as_array(self) -> Array:
        return np.concatenate([self.angular, self.linear])

    def __add__(self, other: "SpatialVector") -> "SpatialVector":
        return SpatialVector._trusted(self.angular + other.angular, self.linear + other.linear)

    def __sub__(self, other: "SpatialVector") -> "SpatialVector":
        return SpatialVector._trusted(self.angular - other.angular, self.linear - other.linear)

    def __neg__(self) -> "SpatialVector":
        return SpatialVector(-self.angular, -self.linear)

    def scaled(self, s: float) -> "SpatialVector":
        return SpatialVector(s * self.angular, s * self.linear)

    def dot(self, other: "SpatialVector") -> float:
        """Scalar pairing; physically meaningful for a motion/force pair (power)."""
        return float(self.angular @ other.angular + self.linear @ other.linear)


@dataclass(frozen=True)
class SpatialTransform:
    """Coordinate transform A -> B: p_B = rotation @ p_A + translation."""

    rotation: Array
    translation: Array

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        if not np.allclose(R.T @ R, np.eye(3), atol=ROT_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise ValueError("rotation must be proper (det +1)")

    @staticmethod
    def _trusted(rotation: Array, translation: Array) -> "SpatialTransform":
        """Internal fast path: rotation is a known-valid product of rotations."""
        x = object.__new__(SpatialTransform)
        object.__setattr__(x, "rotation", rotation)
        object.__setattr__(x, "translation", translation)
        return x

    @staticmethod
    def identity() -> "SpatialTransform":
        return SpatialTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rotation(R: Array) -> "SpatialTransform":
        return SpatialTransform(R, np.zeros(3))

    @staticmethod
    def from_translation(r) -> "SpatialTransform":
        """Pure coordinate shift: p_B = p_A + r."""
        return SpatialTransform(np.eye(3), r)

    @staticmethod
    def from_pose(frame_rotation: Array, origin) -> "SpatialTransform":
        """Transform INTO a frame posed at (axis matrix, origin) in A coordinates."""
        E = np.asarray(frame_rotation, dtype=np.float64).T
        return SpatialTransform(E, -E @ _as_vec3(origin))

    def frame_pose(self) -> tuple[Array, Array]:
        """Pose of frame B in A coordinates: (axis matrix, origin)."""
        return self.rotation.T, -self.rotation.T @ self.translation

    def compose(self, inner: "SpatialTransform") -> "SpatialTransform":
        """Transform equivalent to applying `inner` (A->B) first, then self (B->C).

        Matches the dense product motion_matrix(self) @ motion_matrix(inner).
        """
        return SpatialTransform._trusted(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> "SpatialTransform":
        return SpatialTransform._trusted(self.rotation.T, -self.rotation.T @ self.translation)

    def apply_point(self, p) -> Array:
        return self.rotation @ _as_vec3(p) + self.translation

    def motion_matrix(self) -> Array:
        """Dense 6x6 transform for motion vectors (test oracle / CRBA use)."""
        E, r = self.rotation, self.translation
        X = np.zeros((6, 6))
        X[:3, :3] = E
        X[3:, 3:] = E
        X[3:, :3] = _skew(r) @ E
        return X

    def force_matrix(self) -> Array:
        """Dense 6x6 transform for force vectors (inverse-transpose of motion)."""
        E, r = self.rotation, self.translation
        X = np.zeros((6, 6))
        X[:3, :3] = E
        X[3:, 3:] = E
        X[:3, 3:] = _skew(r) @ E
        return X


def rotation_about_axis(axis, angle: float) -> Array:
    """Coordinate-transform matrix into a frame rotated by `angle` about `axis`."""
    a = _as_vec3(axis)
    a = a / np.linalg.norm(a)
    K = _skew(a)
    R_frame = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    return R_frame.T


def rpy_matrix(roll: float, pitch: float, yaw: float) -> Array:
    """Frame orientation from fixed-axis roll/pitch/yaw (URDF convention).

    Columns are the rotated frame's axes, i.e. maps child coords to parent coords.
    """
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def transform_motion(X: SpatialTransform, v: SpatialVector) -> SpatialVector:
    """Express a motion vector in the transformed frame."""
    E, r = X.rotation, X.translation
    w = E @ v.angular
    return SpatialVector._trusted(w, E @ v.linear + cross3(r, w))


def transform_force(X: SpatialTransform, f: SpatialVector) -> SpatialVector:
    """Express a force vector in the transformed frame (dual of transform_motion)."""
    E, r = X.rotation, X.translation
    lin = E @ f.linear
    return SpatialVector._trusted(E @ f.angular + cross3(r, lin), lin)


def transform_motion_inverse(X: SpatialTransform, v: SpatialVector) -> SpatialVector:
    """Map a motion vector from B coordinates back to A coordinates."""
    E, r = X.rotation, X.translation
    return SpatialVector._trusted(
        E.T @ v.angular, E.T @ (v.linear - cross3(r, v.angular))
    )


def transform_force_inverse(X: SpatialTransform, f: SpatialVector) -> SpatialVector:
    """Map a force vector from B coordinates back to A coordinates."""
    E, r = X.rotation, X.translation
    return SpatialVector._trusted(
        E.T @ (f.angular - cross3(r, f.linear)), E.T @ f.linear
    )


def spatial_cross_motion(v: SpatialVector, m: SpatialVector) -> SpatialVector:
    """Motion-cross-motion operator v x m."""
    return SpatialVector._trusted(
        cross3(v.angular, m.angular),
        cross3(v.angular, m.linear) + cross3(v.linear, m.angular),
    )


def spatial_cross_force(v: SpatialVector, f: SpatialVector) -> SpatialVector:
    """Motion-cross-force operator v x* f; equals -crm(v)^T f."""
    return SpatialVector._trusted(
        cross3(v.angular, f.angular) + cross3(v.linear, f.linear),
        cross3(v.angular, f.linear),
    )


def cross_motion_matrix(v: SpatialVector) -> Array:
    """Dense 6x6 motion cross operator (test oracle)."""
    M = np.zeros((6, 6))
    M[:3, :3] = _skew(v.angular)
    M[3:, 3:] = _skew(v.angular)
    M[3:, :3] = _skew(v.linear)
    return M


def cross_force_matrix(v: SpatialVector) -> Array:
    return -cross_motion_matrix(v).T


@dataclass(frozen=True)
class SpatialInertia:
    """Rigid-body inertia: mass, centre of mass, and rotational inertia taken
    about the link frame ORIGIN (not the com)."""

    mass: float
    com: Array
    rot_inertia: Array

    def __post_init__(self):
        object.__setattr__(self, "com", _as_vec3(self.com))
        I = np.asarray(self.rot_inertia, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rot_inertia", I)
        if not self.mass > 0.0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not np.allclose(I, I.T, atol=1e-12):
            raise ValueError("rotational inertia must be symmetric")

    @staticmethod
    def from_com_inertia(mass: float, com, I_com: Array, rotation: Array | None = None) -> "SpatialInertia":
        """Build from inertia about the com, optionally expressed in a rotated
        inertial frame (URDF style): I_origin = R I_com R^T + m cx cx^T."""
        c = _as_vec3(com)
        I_com = np.asarray(I_com, dtype=np.float64).reshape(3, 3)
        if rotation is not None:
            I_com = rotation @ I_com @ rotation.T
        cx = _skew(c)
        return SpatialInertia(mass, c, I_com + mass * cx @ cx.T)

    @staticmethod
    def point_mass(mass: float, at=(0.0, 0.0, 0.0)) -> "SpatialInertia":
        c = _as_vec3(at)
        cx = _skew(c)
        return SpatialInertia(mass, c, mass * cx @ cx.T + 1e-12 * np.eye(3))

    def matrix(self) -> Array:
        """Dense 6x6 inertia operator [[I_o, m cx], [m cx^T, m 1]]."""
        m, cx = self.mass, _skew(self.com)
        M = np.zeros((6, 6))
        M[:3, :3] = self.rot_inertia
        M[:3, 3:] = m * cx
        M[3:, :3] = m * cx.T
        M[3:, 3:] = m * np.eye(3)
        return M

    def com_inertia(self) -> Array:
        """Rotational inertia about the com."""
        cx = _skew(self.com)
        return self.rot_inertia - self.mass * cx @ cx.T


def inertia_apply(I: SpatialInertia, v: SpatialVector) -> SpatialVector:
    """Force produced by the 6x6 inertia operator acting on a motion vector."""
    m, c = I.mass, I.com
    ang = I.rot_inertia @ v.angular + m * cross3(c, v.linear)
    lin = m * (v.linear - cross3(c, v.angular))
    return SpatialVector._trusted(ang, lin)


def inertia_add(a: SpatialInertia, b: SpatialInertia) -> SpatialInertia:
    """Combine two rigid bodies expressed in the same frame."""
    m = a.mass + b.mass
    com = (a.mass * a.com + b.mass * b.com) / m
    return SpatialInertia(m, com, a.rot_inertia + b.rot_inertia)


def transform_inertia(X: SpatialTransform, I: SpatialInertia) -> SpatialInertia:
    """Pull a child-frame inertia back into the parent frame (X: parent -> child).

    Dense identity: result.matrix() == Xm^T @ I.matrix() @ Xm with
    Xm = X.motion_matrix().
    """
    E = X.rotation
    m = I.mass
    com_parent = X.inverse().apply_point(I.com)
    I_com_parent = E.T @ I.com_inertia() @ E
    cx = _skew(com_parent)
    return SpatialInertia(m, com_parent, I_com_parent + m * cx @ cx.T)
