"""Rotations and frame conversions shared by the simulator, environment and trajectories.

Conventions
-----------
Euler angles are extrinsic x-y-z (roll, pitch, yaw), i.e. ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
All functions broadcast over leading batch dimensions: a ``(..., 3)`` Euler array maps to a
``(..., 3, 3)`` rotation array.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GIMBAL_TOL = 1e-6


class DegenerateRotationError(ValueError):
    """Raised when Euler angles are requested too close to the pitch singularity."""


def canonicalize_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def rot_x(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def rot_y(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def rot_z(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def euler_to_rotation(e) -> np.ndarray:
    """Rotation matrix ``Rz(yaw) Ry(pitch) Rx(roll)`` for Euler angles ``e = (roll, pitch, yaw)``."""
    e = np.asarray(e, dtype=float)
    cr, sr = np.cos(e[..., 0]), np.sin(e[..., 0])
    cp, sp = np.cos(e[..., 1]), np.sin(e[..., 1])
    cy, sy = np.cos(e[..., 2]), np.sin(e[..., 2])
    r = np.empty(e.shape[:-1] + (3, 3))
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


def rotation_to_euler(r, check: bool = True) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation`.

    With ``check=True`` a :class:`DegenerateRotationError` is raised when any input lies within
    ``GIMBAL_TOL`` of ``|pitch| = pi/2``. The simulator calls this with ``check=False`` because a
    tumbling robot may legitimately pass through the singularity; there roll is set to zero.
    """
    r = np.asarray(r, dtype=float)
    sp = np.clip(-r[..., 2, 0], -1.0, 1.0)
    pitch = np.arcsin(sp)
    cp = np.sqrt(r[..., 2, 1] ** 2 + r[..., 2, 2] ** 2)
    degenerate = np.abs(np.abs(pitch) - np.pi / 2) < GIMBAL_TOL
    if check and np.any(degenerate):
        raise DegenerateRotationError("pitch within %.0e of +-pi/2; Euler angles undefined" % GIMBAL_TOL)
    pitch = np.arctan2(sp, cp)
    roll = np.arctan2(r[..., 2, 1], r[..., 2, 2])
    yaw = np.arctan2(r[..., 1, 0], r[..., 0, 0])
    if np.any(degenerate):
        roll = np.where(degenerate, 0.0, roll)
        yaw = np.where(degenerate, np.arctan2(-r[..., 0, 1], r[..., 1, 1]), yaw)
    return canonicalize_angle(np.stack([roll, pitch, yaw], -1))


def world_to_frame(v_world, frame_rot) -> np.ndarray:
    """Express a world vector in the frame whose orientation is ``frame_rot`` (``R^T v``)."""
    return np.einsum("...ji,...j->...i", frame_rot, v_world)


def frame_to_world(v_frame, frame_rot) -> np.ndarray:
    return np.einsum("...ij,...j->...i", frame_rot, v_frame)


def planar_cross(omega_z, p_xy) -> np.ndarray:
    """Velocity ``omega_z * e_z x p`` of a point ``p_xy`` rotating about z, restricted to the plane."""
    p_xy = np.asarray(p_xy, dtype=float)
    omega_z = np.asarray(omega_z, dtype=float)
    return np.stack([-omega_z * p_xy[..., 1], omega_z * p_xy[..., 0]], -1)


def euler_rate_matrix(e) -> np.ndarray:
    """Matrix ``E`` with ``omega_world = E(e) @ d/dt(roll, pitch, yaw)`` for the XYZ convention."""
    e = np.asarray(e, dtype=float)
    cp, sp = np.cos(e[..., 1]), np.sin(e[..., 1])
    cy, sy = np.cos(e[..., 2]), np.sin(e[..., 2])
    m = np.zeros(e.shape[:-1] + (3, 3))
    m[..., 0, 0] = cy * cp
    m[..., 1, 0] = sy * cp
    m[..., 2, 0] = -sp
    m[..., 0, 1] = -sy
    m[..., 1, 1] = cy
    m[..., 2, 2] = 1.0
    return m


def euler_rates_to_angular_velocity(e, e_dot) -> np.ndarray:
    return np.einsum("...ij,...j->...i", euler_rate_matrix(e), e_dot)


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    m = np.zeros(w.shape[:-1] + (3, 3))
    m[..., 0, 1] = -w[..., 2]
    m[..., 0, 2] = w[..., 1]
    m[..., 1, 0] = w[..., 2]
    m[..., 1, 2] = -w[..., 0]
    m[..., 2, 0] = -w[..., 1]
    m[..., 2, 1] = w[..., 0]
    return m


def rotvec_to_rotation(w) -> np.ndarray:
    """Rodrigues' formula for the rotation by angle ``|w|`` about ``w``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    k = skew(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a * k + b * (k @ k)


def orthonormalize(r) -> np.ndarray:
    """Project onto SO(3) via SVD; used to remove integration drift."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    u[..., :, -1] *= d[..., None]
    return u @ vt


@dataclass(frozen=True)
class FrameTransform:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "FrameTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_pose(cls, position, euler) -> "FrameTransform":
        return cls(euler_to_rotation(euler), np.asarray(position, dtype=float))

    def apply(self, x) -> np.ndarray:
        return frame_to_world(x, self.rotation) + self.translation

    def compose(self, other: "FrameTransform") -> "FrameTransform":
        """``self ∘ other``: apply ``other`` first."""
        return FrameTransform(self.rotation @ other.rotation, self.apply(other.translation))

    def inverse(self) -> "FrameTransform":
        rt = np.swapaxes(self.rotation, -1, -2)
        return FrameTransform(rt, -frame_to_world(self.translation, rt))

    def __matmul__(self, other: "FrameTransform") -> "FrameTransform":
        return self.compose(other)
