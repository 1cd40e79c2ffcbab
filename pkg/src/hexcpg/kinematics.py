"""3-DoF leg kinematics and hip mount transforms.

Each leg has its own kinematic frame at the mount, rotated about z by the
mount yaw so that x points outward. Joint order per leg: hip yaw, hip pitch,
knee. Pitch angles are positive upward; the knee bends downward (negative),
giving the insect-like knee-up posture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .cpg import N_LEGS
from .rotations import rot_z


class Unreachable(ValueError):
    def __init__(self, excess):
        self.excess = excess
        super().__init__(f"target outside leg workspace by {np.max(excess):.6g} m")


class JointLimit(ValueError):
    pass


class LegJointAngles(NamedTuple):
    q_hip_yaw: float
    q_hip_pitch: float
    q_knee: float


def _default_mounts():
    return np.array([
        [0.17, 0.10, 0.0],   # LF
        [0.17, -0.10, 0.0],  # RF
        [0.0, 0.13, 0.0],    # LM
        [0.0, -0.13, 0.0],   # RM
        [-0.17, 0.10, 0.0],  # LB
        [-0.17, -0.10, 0.0],  # RB
    ])


def _default_yaws():
    return np.array([np.pi / 4, -np.pi / 4, np.pi / 2, -np.pi / 2, 3 * np.pi / 4, -3 * np.pi / 4])


def _default_limits():
    return np.array([[-np.pi / 2, np.pi / 2], [-np.pi / 2, np.pi / 2], [-2.6, -0.2]])


@dataclass
class LegGeometry:
    l_coxa: float = 0.05
    l_femur: float = 0.15
    l_tibia: float = 0.25
    mount_pos: np.ndarray = field(default_factory=_default_mounts)
    mount_yaw: np.ndarray = field(default_factory=_default_yaws)
    joint_limits: np.ndarray = field(default_factory=_default_limits)
    stance_radius: float = 0.20  # horizontal mount-to-foot distance at neutral

    def __post_init__(self):
        self.mount_pos = np.asarray(self.mount_pos, dtype=float).reshape(N_LEGS, 3)
        self.mount_yaw = np.asarray(self.mount_yaw, dtype=float).reshape(N_LEGS)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float).reshape(3, 2)
        if min(self.l_coxa, self.l_femur, self.l_tibia) <= 0:
            raise ValueError("link lengths must be positive")

    @property
    def reach(self) -> float:
        return self.l_coxa + self.l_femur + self.l_tibia

    @property
    def mount_rot(self) -> np.ndarray:
        """(6, 3, 3) leg frame -> body frame, cached against the current yaws."""
        key = self.mount_yaw.tobytes()
        cached = self.__dict__.get("_rot_cache")
        if cached is None or cached[0] != key:
            cached = (key, rot_z(self.mount_yaw))
            self.__dict__["_rot_cache"] = cached
        return cached[1]

    def nominal_foot(self) -> np.ndarray:
        """Neutral foot offsets in the body-aligned hip frames, z = 0, shape (6, 3)."""
        r = self.stance_radius
        return np.stack([r * np.cos(self.mount_yaw), r * np.sin(self.mount_yaw), np.zeros(N_LEGS)], -1)


def forward_kinematics(g: LegGeometry, q) -> np.ndarray:
    """Foot position in the leg frame. ``q`` has shape (..., 3)."""
    q = np.asarray(q, dtype=float)
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    rho = g.l_coxa + g.l_femur * np.cos(q2) + g.l_tibia * np.cos(q2 + q3)
    z = g.l_femur * np.sin(q2) + g.l_tibia * np.sin(q2 + q3)
    return np.stack([rho * np.cos(q1), rho * np.sin(q1), z], -1)


def leg_jacobian(g: LegGeometry, q) -> np.ndarray:
    """d(foot)/d(q) in the leg frame, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    c1, s1 = np.cos(q1), np.sin(q1)
    s2, c2 = np.sin(q2), np.cos(q2)
    s23, c23 = np.sin(q2 + q3), np.cos(q2 + q3)
    rho = g.l_coxa + g.l_femur * c2 + g.l_tibia * c23
    drho2 = -g.l_femur * s2 - g.l_tibia * s23
    drho3 = -g.l_tibia * s23
    dz2 = g.l_femur * c2 + g.l_tibia * c23
    dz3 = g.l_tibia * c23
    zero = np.zeros_like(q1)
    return np.stack(
        [
            np.stack([-rho * s1, drho2 * c1, drho3 * c1], -1),
            np.stack([rho * c1, drho2 * s1, drho3 * s1], -1),
            np.stack([zero, dz2, dz3], -1),
        ],
        -2,
    )


def inverse_kinematics(g: LegGeometry, target, strict: bool = True) -> np.ndarray:
    """Analytic IK on the knee-up branch. ``target`` has shape (..., 3).

    With ``strict=False`` unreachable targets are pulled onto the workspace
    boundary and the result is clipped to joint limits instead of raising.
    """
    p = np.asarray(target, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    yaw = np.arctan2(y, x)
    rho = np.hypot(x, y)
    # feet behind the yaw axis: turn the hip around and reach with negative rho
    flip = (yaw < g.joint_limits[0, 0]) | (yaw > g.joint_limits[0, 1])
    yaw = np.where(flip, (yaw + 2 * np.pi) % (2 * np.pi) - np.pi, yaw)
    rho = np.where(flip, -rho, rho)
    u = rho - g.l_coxa
    d = np.hypot(u, z)
    d_max = g.l_femur + g.l_tibia
    d_min = abs(g.l_femur - g.l_tibia)
    if strict:
        excess = np.maximum(d - d_max, d_min - d)
        if np.any(excess > 1e-12):
            raise Unreachable(excess)
    else:
        scale = np.clip(d, d_min + 1e-6, d_max - 1e-6) / np.maximum(d, 1e-12)
        u, z, d = u * scale, z * scale, d * scale
    c3 = (d * d - g.l_femur**2 - g.l_tibia**2) / (2 * g.l_femur * g.l_tibia)
    q3 = -np.arccos(np.clip(c3, -1.0, 1.0))
    q2 = np.arctan2(z, u) - np.arctan2(g.l_tibia * np.sin(q3), g.l_femur + g.l_tibia * np.cos(q3))
    q2 = (q2 + np.pi) % (2 * np.pi) - np.pi
    q = np.stack([yaw, q2, q3], -1)
    lo, hi = g.joint_limits[:, 0], g.joint_limits[:, 1]
    if strict:
        if np.any((q < lo - 1e-12) | (q > hi + 1e-12)):
            raise JointLimit("IK solution violates joint limits")
        return q
    return np.clip(q, lo, hi)


def body_to_leg(g: LegGeometry, p_hip_body) -> np.ndarray:
    """Rotate body-aligned hip-frame offsets (..., 6, 3) into leg frames."""
    return np.einsum("lji,...lj->...li", g.mount_rot, p_hip_body)


def leg_to_body(g: LegGeometry, p_leg) -> np.ndarray:
    return np.einsum("lij,...lj->...li", g.mount_rot, p_leg)


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, p):
        return np.asarray(p) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def hip_offset(g: LegGeometry, leg: int) -> RigidTransform:
    return RigidTransform(rot_z(g.mount_yaw[leg]), g.mount_pos[leg].copy())


def hip_transform(g: LegGeometry, base_pose: RigidTransform, leg: int) -> RigidTransform:
    """Pose of a leg frame in the world (maps leg coordinates to world)."""
    return base_pose.compose(hip_offset(g, leg))


def nominal_joint_angles(g: LegGeometry, h: float) -> np.ndarray:
    """Joint angles (6, 3) for the neutral mapping output (foot at depth h)."""
    target = g.nominal_foot() + np.array([0.0, 0.0, -h])
    return inverse_kinematics(g, body_to_leg(g, target), strict=False)
