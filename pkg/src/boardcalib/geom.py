"""Rigid transforms, Euler angles and the pinhole camera model.

Frame conventions used throughout the package:

* ``T_src_dst`` maps coordinates expressed in frame ``src`` into frame ``dst``.
* Camera frame: x right, y down, z forward.
* LiDAR frame: x forward, y left, z up.
* Board frame: origin at the board center, x right, y down, z along the
  normal pointing away from an observer facing the printed side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera

# camera axes expressed in the LiDAR frame for a forward looking camera
CAMERA_TO_LIDAR_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3): ``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-9 or np.linalg.det(r) <= 0:
            r = nearest_rotation(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, p) -> np.ndarray:
        """Transform a point ``(3,)`` or an array of points ``(N, 3)``."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __repr__(self):
        e = np.degrees(rotation_to_euler(self.rotation))
        return (
            f"RigidTransform(rpy_deg={np.round(e, 4).tolist()}, "
            f"t={np.round(self.translation, 5).tolist()})"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def apply(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class EulerAngles:
    """Intrinsic Z-Y-X angles in radians: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""

    roll: float
    pitch: float
    yaw: float

    @classmethod
    def from_degrees(cls, roll, pitch, yaw) -> EulerAngles:
        return cls(*np.radians([roll, pitch, yaw]).tolist())

    def degrees(self) -> tuple[float, float, float]:
        return tuple(np.degrees([self.roll, self.pitch, self.yaw]).tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])


def euler_to_matrix(roll, pitch, yaw) -> np.ndarray:
    """Rotation matrix for intrinsic ZYX angles; broadcasts over array inputs.

    Scalars give ``(3, 3)``; arrays of shape ``S`` give ``S + (3, 3)``.
    """
    roll, pitch, yaw = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (roll, pitch, yaw)))
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    r = np.empty(roll.shape + (3, 3))
    r[..., 0, 0] = cy * cp
    r[..., 0, 1] = cy * sp * sr - sy * cr
    r[..., 0, 2] = cy * sp * cr + sy * sr
    r[..., 1, 0] = sy * cp
    r[..., 1, 1] = sy * sp * sr + cy * cr
    r[..., 1, 2] = sy * sp * cr - cy * sr
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * sr
    r[..., 2, 2] = cp * cr
    return r


def euler_to_rotation(e: EulerAngles) -> RigidTransform:
    return RigidTransform(euler_to_matrix(e.roll, e.pitch, e.yaw), np.zeros(3))


def rotation_to_euler(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix`, returns ``[roll, pitch, yaw]`` in radians."""
    r = np.asarray(r, dtype=float)
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    if abs(np.cos(pitch)) > 1e-9:
        roll = np.arctan2(r[2, 1], r[2, 2])
        yaw = np.arctan2(r[1, 0], r[0, 0])
    else:
        # gimbal lock: only roll - yaw (or roll + yaw) is observable
        roll = 0.0
        yaw = np.arctan2(-r[0, 1], r[1, 1])
    return np.array([roll, pitch, yaw])


def rotation_error_euler(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Euler angles (radians) of ``estimate @ truth.T``, the residual rotation."""
    return rotation_to_euler(np.asarray(estimate) @ np.asarray(truth).T)


@dataclass(frozen=True)
class PinholeCamera:
    """Undistorted pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)
        )

    def to_dict(self) -> dict:
        return {
            "fx_px": self.fx,
            "fy_px": self.fy,
            "cx_px": self.cx,
            "cy_px": self.cy,
            "width_px": self.width,
            "height_px": self.height,
        }

    @classmethod
    def from_dict(cls, d) -> PinholeCamera:
        return cls(
            float(d["fx_px"]), float(d["fy_px"]), float(d["cx_px"]), float(d["cy_px"]),
            int(d["width_px"]), int(d["height_px"]),
        )


def project(cam: PinholeCamera, p) -> np.ndarray:
    """Project camera-frame points ``(3,)`` or ``(N, 3)`` to pixels.

    Raises :class:`BehindCamera` if any depth is at or below 1e-6 m.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= 1e-6):
        raise BehindCamera("point at or behind the image plane")
    u = cam.fx * p[..., 0] / z + cam.cx
    v = cam.fy * p[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project_unchecked(cam: PinholeCamera, p) -> np.ndarray:
    """Vectorised projection without the depth check (callers mask by depth)."""
    p = np.asarray(p, dtype=float)
    z = np.where(np.abs(p[..., 2]) < 1e-12, 1e-12, p[..., 2])
    return np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)
