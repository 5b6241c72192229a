"""Rigid transforms, 3D registration of scans and the planar affine approximation.

Conventions: a pose is world-from-sensor, ``p_world = R @ p_sensor + t``.
The relative transform of a pair maps the later scan into the earlier one's frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SingularityError

ORTHO_TOL = 1e-6
SINGULAR_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def translation(cls, x, y, z) -> "RigidTransform":
        return cls(np.eye(3), (x, y, z))

    @classmethod
    def rot_z(cls, angle, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_z(angle), t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "RigidTransform":
        Rt = self.R.T
        return RigidTransform(Rt, -Rt @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.R.T + self.t

    def check(self, tol=ORTHO_TOL):
        """Raise DataError unless R is a proper rotation within ``tol``."""
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        det = np.linalg.det(self.R)
        if not np.isfinite(err) or err >= tol or abs(det - 1.0) >= tol:
            raise DataError(f"rotation not orthonormal: |R^T R - I|_inf={err:.3g}, det={det:.9g}")
        if not np.all(np.isfinite(self.t)):
            raise DataError("translation has non-finite entries")
        return self


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def relative_transform(pose_a: RigidTransform, pose_b: RigidTransform) -> RigidTransform:
    """Transform taking points in frame ``b`` to frame ``a``: ``pose_a^-1 ∘ pose_b``."""
    Ra_t = pose_a.R.T
    return RigidTransform(Ra_t @ pose_b.R, Ra_t @ (pose_b.t - pose_a.t))


def register_3d(cloud, rel: RigidTransform):
    """Map every point of ``cloud`` through ``rel``; intensity and order untouched."""
    from .io_kitti import PointCloud

    pts = cloud.points.copy()
    pts[:, :3] = rel.apply(cloud.points[:, :3])
    return PointCloud(pts, scan_id=cloud.scan_id, timestamp=cloud.timestamp)


@dataclass(frozen=True)
class Affine2D:
    """Planar map ``u -> A @ u + b2`` in metric units."""

    A: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64).reshape(2, 2)
        b2 = np.array(self.b2, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b2))):
            raise DataError("affine has non-finite entries")
        A.flags.writeable = False
        b2.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b2", b2)

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(2), np.zeros(2))

    def apply(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.A.T + self.b2

    def compose(self, other: "Affine2D") -> "Affine2D":
        return Affine2D(self.A @ other.A, self.A @ other.b2 + self.b2)

    def det(self) -> float:
        A = self.A
        return float(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])


def affine2d_from_se3(rel: RigidTransform) -> Affine2D:
    """Drop the z-coupling of ``rel``: keep the upper-left 2x2 block and (t1, t2).

    No re-orthonormalisation is done, so tilted transforms give a shrunk ``A``.
    """
    return Affine2D(rel.R[:2, :2], rel.t[:2])


def affine2d_invert(a: Affine2D) -> Affine2D:
    det = a.det()
    if not np.isfinite(det) or abs(det) <= SINGULAR_TOL:
        raise SingularityError(f"affine is singular (det={det:.3g})")
    (p, q), (r, s) = a.A
    Ainv = np.array([[s, -q], [-r, p]]) / det
    return Affine2D(Ainv, -Ainv @ a.b2)
