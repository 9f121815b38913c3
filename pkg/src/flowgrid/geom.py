"""Rigid 3D transforms (yaw-only rotations), boxes, and point membership.

All transforms are rotation-matrix + translation pairs in float64. Rotations
are restricted to yaw (about +z): label boxes carry a heading angle only, so
full SO(3) support is unnecessary. The 4x4 homogeneous form appears only at
serialization boundaries (see formats.py).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Transform3:
    """Rigid transform: p -> rotation @ p + translation.

    rotation is 3x3 orthonormal with det +1; translation is meters.
    Immutable; all operations return new instances.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix4(self) -> np.ndarray:
        """4x4 row-major homogeneous matrix (serialization form)."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix4(m: np.ndarray) -> "Transform3":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return Transform3(m[:3, :3], m[:3, 3])


def identity() -> Transform3:
    return Transform3(np.eye(3), np.zeros(3))


def translate(x: float, y: float, z: float) -> Transform3:
    return Transform3(np.eye(3), np.array([x, y, z], dtype=np.float64))


def yaw(angle: float) -> Transform3:
    """Rotation by `angle` radians about +z, zero translation."""
    c, s = np.cos(angle), np.sin(angle)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    _check_rotation(r)
    return Transform3(r, np.zeros(3))


def pose(x: float, y: float, z: float, heading: float) -> Transform3:
    """Yaw rotation by `heading` followed by translation to (x, y, z)."""
    t = yaw(heading)
    return Transform3(t.rotation, np.array([x, y, z], dtype=np.float64))


def _check_rotation(r: np.ndarray) -> None:
    if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHO_TOL):
        raise ValueError("rotation matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
        raise ValueError("rotation matrix determinant is not +1")


def compose(a: Transform3, b: Transform3) -> Transform3:
    """Transform equal to applying b first, then a: (a.b)(p) = a(b(p))."""
    return Transform3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: Transform3) -> Transform3:
    """Inverse transform; compose(t, invert(t)) is the identity."""
    rt = t.rotation.T
    return Transform3(rt, -(rt @ t.translation))


def apply(t: Transform3, points: np.ndarray) -> np.ndarray:
    return t.apply(points)


def heading_of(t: Transform3) -> float:
    """Yaw angle of a yaw-only transform, in (-pi, pi]."""
    return wrap_angle(float(np.arctan2(t.rotation[1, 0], t.rotation[0, 0])))


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = (angle + np.pi) % (2.0 * np.pi) - np.pi
    if a == -np.pi:
        a = np.pi
    return float(a)


@dataclass(frozen=True)
class Box3:
    """Upright 3D box: center (m), dims (length, width, height, m), yaw heading.

    Length spans the box's local x axis, width local y, height local z.
    """

    center: np.ndarray
    dims: np.ndarray
    heading: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        d = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not (d > 0).all():
            raise ValueError("box dims must be strictly positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


def box_pose(b: Box3) -> Transform3:
    """Box frame -> parent frame transform (yaw(heading), then center)."""
    return pose(b.center[0], b.center[1], b.center[2], b.heading)


def contains(b: Box3, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Membership test: point within dims/2 + margin on every box axis.

    Accepts one point (3,) or a stack (N, 3); returns bool or (N,) bools.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    p = np.asarray(points, dtype=np.float64)
    local = invert(box_pose(b)).apply(p)
    half = b.dims / 2.0 + margin
    inside = (np.abs(local) <= half).all(axis=-1)
    return inside
