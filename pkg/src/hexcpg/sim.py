"""Simplified hexapod dynamics.

The base is a single rigid body carrying the leg masses. Legs are massless
linkages whose joints have a small reflected inertia: joint accelerations come
from the motor torque plus the foot contact force mapped through the leg
Jacobian, and the same contact force acts on the base at the foot point.
Feet are points with spring-damper normal contact and Coulomb-capped viscous
tangential friction against a heightfield.

All arrays carry the environment axis first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .cpg import N_LEGS
from .kinematics import LegGeometry, forward_kinematics, leg_jacobian, nominal_joint_angles
from .rotations import integrate_quat, quat_from_yaw, quat_to_mat
from .terrain import TerrainSet

N_JOINTS = 3 * N_LEGS
GRAVITY = 9.81


class NumericalDivergence(RuntimeError):
    pass


@dataclass
class PdGains:
    kp: float = 20.0
    kd: float = 0.5
    torque_limit: float = 8.0

    def __post_init__(self):
        if self.kp <= 0 or self.kd < 0:
            raise ValueError("need kp > 0 and kd >= 0")


@dataclass
class SimParams:
    dt: float = 1e-3
    mass: float = 4.0
    inertia: tuple = (0.032, 0.067, 0.095)
    gravity: float = GRAVITY
    contact_stiffness: float = 5000.0
    contact_damping: float = 50.0
    tangential_damping: float = 100.0
    friction: float = 0.8
    joint_inertia: float = 0.01
    joint_friction: float = 0.05
    base_half_extents: tuple = (0.22, 0.15, 0.04)
    max_speed: float = 50.0
    max_joint_speed: float = 500.0


@dataclass
class RobotState:
    pos: np.ndarray        # (N, 3) world
    quat: np.ndarray       # (N, 4) body -> world, (w, x, y, z)
    lin_vel: np.ndarray    # (N, 3) world
    ang_vel: np.ndarray    # (N, 3) world
    q: np.ndarray          # (N, 18) legs in LF, RF, LM, RM, LB, RB order; yaw, pitch, knee
    qd: np.ndarray         # (N, 18)
    foot_contact: np.ndarray = None  # (N, 6) bool
    foot_air_time: np.ndarray = None  # (N, 6) s

    def __post_init__(self):
        n = self.pos.shape[0]
        if self.foot_contact is None:
            self.foot_contact = np.zeros((n, N_LEGS), dtype=bool)
        if self.foot_air_time is None:
            self.foot_air_time = np.zeros((n, N_LEGS))

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_mat(self.quat)

    @property
    def base_lin_vel(self) -> np.ndarray:
        """Linear velocity in the body frame."""
        return np.einsum("nji,nj->ni", self.rotation, self.lin_vel)

    @property
    def base_ang_vel(self) -> np.ndarray:
        return np.einsum("nji,nj->ni", self.rotation, self.ang_vel)

    def projected_gravity(self) -> np.ndarray:
        return -self.rotation[:, 2, :]

    def copy(self) -> "RobotState":
        return RobotState(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))

    def take(self, idx) -> "RobotState":
        return RobotState(*(np.array(getattr(self, f)[idx]) for f in self.__dataclass_fields__))

    def assign(self, idx, other: "RobotState"):
        for f in self.__dataclass_fields__:
            getattr(self, f)[idx] = getattr(other, f)


class ContactReport(NamedTuple):
    foot_forces: np.ndarray       # (N, 6, 3) world
    undesired_contact: np.ndarray  # (N, 7): base, then one flag per leg link
    touchdown: np.ndarray         # (N, 6) feet that landed this step
    touchdown_air_time: np.ndarray  # (N, 6) air time at landing, 0 elsewhere
    diverged: np.ndarray          # (N,)


def pd_torque(q_des, q, qd, gains: PdGains) -> np.ndarray:
    tau = gains.kp * (np.asarray(q_des) - q) - gains.kd * qd
    return np.clip(tau, -gains.torque_limit, gains.torque_limit)


def foot_kinematics(state: RobotState, geom: LegGeometry, R=None):
    """World foot positions, lever arms from the base and the world-frame leg Jacobians."""
    R = state.rotation if R is None else R
    q_leg = state.q.reshape(-1, N_LEGS, 3)
    p_leg = forward_kinematics(geom, q_leg)
    M = geom.mount_rot
    p_body = geom.mount_pos + (M @ p_leg[..., None])[..., 0]
    r_w = (R[:, None] @ p_body[..., None])[..., 0]
    J_w = R[:, None] @ (M @ leg_jacobian(geom, q_leg))
    return state.pos[:, None, :] + r_w, r_w, J_w


def knee_positions(state: RobotState, geom: LegGeometry) -> np.ndarray:
    """World positions of the femur-tibia joints, (N, 6, 3)."""
    q = state.q.reshape(-1, N_LEGS, 3)
    rho = geom.l_coxa + geom.l_femur * np.cos(q[..., 1])
    p_leg = np.stack([rho * np.cos(q[..., 0]), rho * np.sin(q[..., 0]), geom.l_femur * np.sin(q[..., 1])], -1)
    p_body = geom.mount_pos + np.einsum("lij,nlj->nli", geom.mount_rot, p_leg)
    return state.pos[:, None, :] + np.einsum("nij,nlj->nli", state.rotation, p_body)


def base_probe_points(state: RobotState, params: SimParams) -> np.ndarray:
    """Bottom corners and bottom centre of the base box, (N, 5, 3)."""
    hx, hy, hz = params.base_half_extents
    local = np.array([[hx, hy, -hz], [hx, -hy, -hz], [-hx, hy, -hz], [-hx, -hy, -hz], [0.0, 0.0, -hz]])
    return state.pos[:, None, :] + np.einsum("nij,pj->npi", state.rotation, local)


def detect_collision(state: RobotState, terrain: TerrainSet, terrain_idx, geom: LegGeometry,
                     params: SimParams) -> np.ndarray:
    """Undesired contact flags (N, 7): column 0 is the base, 1..6 the leg links (knees)."""
    idx = np.asarray(terrain_idx)
    base = base_probe_points(state, params)
    ground = terrain.height_at(idx[:, None], base[..., 0], base[..., 1])
    base_hit = np.any(base[..., 2] < ground, axis=1)
    knees = knee_positions(state, geom)
    kg = terrain.height_at(idx[:, None], knees[..., 0], knees[..., 1])
    return np.concatenate([base_hit[:, None], knees[..., 2] < kg], axis=1)


def contact_forces(foot_pos, foot_vel, terrain: TerrainSet, terrain_idx, params: SimParams):
    idx = np.asarray(terrain_idx)[:, None]
    ground = terrain.height_at(idx, foot_pos[..., 0], foot_pos[..., 1])
    normal = terrain.normal_at(idx, foot_pos[..., 0], foot_pos[..., 1])
    depth = (ground - foot_pos[..., 2]) * normal[..., 2]
    in_contact = depth > 0
    vn = np.einsum("nli,nli->nl", foot_vel, normal)
    fn = params.contact_stiffness * depth - params.contact_damping * vn
    fn = np.where(in_contact, np.maximum(fn, 0.0), 0.0)
    vt = foot_vel - vn[..., None] * normal
    ft = -params.tangential_damping * vt
    ft_norm = np.linalg.norm(ft, axis=-1)
    cap = params.friction * fn
    scale = np.where(ft_norm > cap, cap / np.maximum(ft_norm, 1e-12), 1.0)
    ft = np.where(in_contact[..., None], ft * scale[..., None], 0.0)
    return fn[..., None] * normal + ft, in_contact


BACKENDS = ("numpy", "numba")


def step_dynamics(state: RobotState, tau, terrain: TerrainSet, terrain_idx, geom: LegGeometry,
                  params: SimParams, raise_on_divergence: bool = True, check_collision: bool = True,
                  backend: str = "numpy"):
    """One semi-implicit Euler step. Returns the new state and a ContactReport.

    With ``check_collision=False`` the undesired-contact flags are left empty;
    callers that only need them at a lower rate use ``detect_collision``.
    ``backend="numba"`` runs the compiled kernel, which computes the same step.
    """
    dt = params.dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    if backend == "numba":
        new, f, touchdown, touchdown_air, diverged = _step_numba(state, tau, terrain, terrain_idx, geom, params)
        return _finish(new, f, touchdown, touchdown_air, diverged, terrain, terrain_idx, geom, params,
                       raise_on_divergence, check_collision)
    if backend != "numpy":
        raise ValueError(f"backend must be one of {BACKENDS}")
    R = state.rotation
    foot_pos, r_w, J_w = foot_kinematics(state, geom, R)
    qd_leg = state.qd.reshape(-1, N_LEGS, 3)
    foot_vel = (
        state.lin_vel[:, None, :]
        + np.cross(state.ang_vel[:, None, :], r_w)
        + (J_w @ qd_leg[..., None])[..., 0]
    )
    f, in_contact = contact_forces(foot_pos, foot_vel, terrain, terrain_idx, params)

    # joints
    tau_contact = (f[..., None, :] @ J_w)[..., 0, :].reshape(-1, N_JOINTS)
    qdd = (np.asarray(tau) + tau_contact - params.joint_friction * state.qd) / params.joint_inertia
    qd = state.qd + dt * qdd
    q = state.q + dt * qd
    lo, hi = _joint_bounds(geom)
    at_limit = ((q < lo) & (qd < 0)) | ((q > hi) & (qd > 0))
    qd = np.where(at_limit, 0.0, qd)
    q = np.clip(q, lo, hi)

    # base: Euler equations in the body frame
    force = f.sum(axis=1)
    force[:, 2] -= params.mass * params.gravity
    torque_b = (np.cross(r_w, f).sum(axis=1)[:, None, :] @ R)[:, 0]
    w_b = (state.ang_vel[:, None, :] @ R)[:, 0]
    I_body = np.asarray(params.inertia)
    wdot_b = (torque_b - np.cross(w_b, I_body * w_b)) / I_body
    lin_vel = state.lin_vel + dt * force / params.mass
    ang_vel = state.ang_vel + dt * (R @ wdot_b[..., None])[..., 0]
    pos = state.pos + dt * lin_vel
    quat = integrate_quat(state.quat, ang_vel, dt)

    touchdown = in_contact & ~state.foot_contact
    air = np.where(in_contact, 0.0, state.foot_air_time + dt)
    touchdown_air = np.where(touchdown, state.foot_air_time, 0.0)

    new = RobotState(pos, quat, lin_vel, ang_vel, q, qd, in_contact, air)
    diverged = ~(
        np.isfinite(pos).all(1) & np.isfinite(quat).all(1) & np.isfinite(qd).all(1)
        & (np.abs(lin_vel).max(axis=1) < params.max_speed)
        & (np.abs(ang_vel).max(axis=1) < params.max_speed)
        & (np.abs(qd).max(axis=1) < params.max_joint_speed)
    )
    return _finish(new, f, touchdown, touchdown_air, diverged, terrain, terrain_idx, geom, params,
                   raise_on_divergence, check_collision)


def _finish(new, f, touchdown, touchdown_air, diverged, terrain, terrain_idx, geom, params,
            raise_on_divergence, check_collision):
    if raise_on_divergence and diverged.any():
        raise NumericalDivergence(f"state diverged in envs {np.flatnonzero(diverged).tolist()}")
    if check_collision:
        undesired = detect_collision(new, terrain, terrain_idx, geom, params)
    else:
        undesired = np.zeros((new.n, 1 + N_LEGS), dtype=bool)
    return new, ContactReport(f, undesired, touchdown, touchdown_air, diverged)


def _step_numba(state: RobotState, tau, terrain: TerrainSet, terrain_idx, geom: LegGeometry, params: SimParams):
    from ._fast import params_vector, physics_step

    n = state.n
    out = RobotState(
        np.empty((n, 3)), np.empty((n, 4)), np.empty((n, 3)), np.empty((n, 3)),
        np.empty((n, N_JOINTS)), np.empty((n, N_JOINTS)),
        np.empty((n, N_LEGS), dtype=bool), np.empty((n, N_LEGS)),
    )
    f = np.empty((n, N_LEGS, 3))
    touchdown = np.empty((n, N_LEGS), dtype=bool)
    touchdown_air = np.empty((n, N_LEGS))
    diverged = np.empty(n, dtype=bool)
    lo, hi = geom.joint_limits[:, 0].copy(), geom.joint_limits[:, 1].copy()
    links = np.array([geom.l_coxa, geom.l_femur, geom.l_tibia])
    idx = np.broadcast_to(np.asarray(terrain_idx, dtype=np.int64), (n,)).copy()
    physics_step(
        state.pos, state.quat, state.lin_vel, state.ang_vel, state.q, state.qd,
        state.foot_contact, state.foot_air_time, np.ascontiguousarray(tau, dtype=float),
        terrain.heights, float(terrain.resolution), terrain.origins, idx,
        geom.mount_pos, geom.mount_yaw, links, lo, hi, params_vector(params),
        out.pos, out.quat, out.lin_vel, out.ang_vel, out.q, out.qd, out.foot_contact, out.foot_air_time,
        touchdown, touchdown_air, f, diverged,
    )
    return out, f, touchdown, touchdown_air, diverged


def _joint_bounds(geom: LegGeometry):
    return np.tile(geom.joint_limits[:, 0], N_LEGS), np.tile(geom.joint_limits[:, 1], N_LEGS)


def standing_state(n: int, geom: LegGeometry, h: float, xy=None, yaw=None, ground=None) -> RobotState:
    """Robots in the neutral stance with their feet just touching the ground."""
    q = np.tile(nominal_joint_angles(geom, h).reshape(-1), (n, 1))
    xy = np.zeros((n, 2)) if xy is None else np.asarray(xy, dtype=float)
    yaw = np.zeros(n) if yaw is None else np.asarray(yaw, dtype=float)
    ground = np.zeros(n) if ground is None else np.asarray(ground, dtype=float)
    pos = np.concatenate([xy, (ground + h - 1e-4)[:, None]], axis=1)
    zeros = np.zeros((n, 3))
    return RobotState(pos, quat_from_yaw(yaw), zeros.copy(), zeros.copy(), q, np.zeros((n, N_JOINTS)))


def reset_env(terrain: TerrainSet, terrain_idx, geom: LegGeometry, h: float, xy, rng: np.random.Generator):
    """Neutral stance at ``xy`` with a random heading, lifted to the highest ground under the feet."""
    yaw = rng.uniform(-np.pi, np.pi)
    st = standing_state(1, geom, h, xy=np.asarray(xy, dtype=float)[None], yaw=np.array([yaw]))
    feet, _, _ = foot_kinematics(st, geom)
    idx = np.full((1, N_LEGS), terrain_idx)
    ground = terrain.height_at(idx, feet[..., 0], feet[..., 1]).max()
    st.pos[:, 2] += ground
    return st
