"""Observation, action decoding, rewards and the batched locomotion environment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import cpg
from .cpg import N_LEGS, CpgParams, NetworkState
from .kinematics import LegGeometry, body_to_leg, inverse_kinematics, nominal_joint_angles
from .mapping import H_DEFAULT, K2_DEFAULT, map_feet
from .sim import (
    N_JOINTS,
    PdGains,
    RobotState,
    SimParams,
    detect_collision,
    pd_torque,
    reset_env,
    step_dynamics,
)
from .terrain import CurriculumGrid, TerrainSet, build_curriculum, flat, make_terrain

VARIANTS = ("cpg_rl", "rl_baseline")

# raw layout: k1 for the six legs, d_step, phi_dir
CPG_ACTION_LOW = np.array([0.0] * N_LEGS + [0.0, -0.6])
CPG_ACTION_HIGH = np.array([0.12] * N_LEGS + [0.15, 0.6])

# rl_baseline: per-leg (dx, dy, z) foot target around the neutral stance
BASELINE_ACTION_LOW = np.tile([-0.15, -0.15, -H_DEFAULT - 0.2], N_LEGS)
BASELINE_ACTION_HIGH = np.tile([0.15, 0.15, -H_DEFAULT + 0.2], N_LEGS)

REWARD_TERMS = (
    "lin_vel_tracking",
    "ang_vel_tracking",
    "lin_vel_z",
    "ang_vel_xy",
    "hip_rotation",
    "joint_velocity",
    "joint_acceleration",
    "action_rate",
    "torque",
    "collision",
    "feet_air_time",
)
REWARD1_WEIGHTS = {
    "lin_vel_tracking": 4.0,
    "ang_vel_tracking": 1.0,
    "lin_vel_z": -1.0,
    "ang_vel_xy": -0.05,
    "hip_rotation": -0.5,
    "joint_velocity": -0.001,
    "joint_acceleration": -2.5e-7,
    "action_rate": -0.01,
    "torque": -1e-4,
    "collision": -1.0,
    "feet_air_time": 1.0,
}
REWARD2_TERMS = frozenset({"lin_vel_tracking", "ang_vel_tracking", "torque", "collision"})

OBS_SCALES = {"lin_vel": 2.0, "ang_vel": 0.25, "dof_pos": 1.0, "dof_vel": 0.05}


def action_bounds(variant: str):
    if variant == "cpg_rl":
        return CPG_ACTION_LOW, CPG_ACTION_HIGH
    if variant == "rl_baseline":
        return BASELINE_ACTION_LOW, BASELINE_ACTION_HIGH
    raise ValueError(f"unknown variant {variant!r}")


def obs_dim(variant: str) -> int:
    return 3 + 3 + N_JOINTS + N_JOINTS + 3 + len(action_bounds(variant)[0]) + 3


def decode_action(raw, low=CPG_ACTION_LOW, high=CPG_ACTION_HIGH) -> np.ndarray:
    """Clip to [-1, 1] then map affinely onto [low, high]."""
    c = np.clip(np.asarray(raw, dtype=float), -1.0, 1.0)
    return low + 0.5 * (c + 1.0) * (high - low)


def split_cpg_action(decoded):
    """(k1 (..., 6), d_step (...), phi_dir (...)) from a decoded cpg_rl action."""
    decoded = np.asarray(decoded)
    return decoded[..., :N_LEGS], decoded[..., N_LEGS], decoded[..., N_LEGS + 1]


def tracking_kernel(err, sigma: float = 0.25):
    err = np.asarray(err, dtype=float)
    return np.exp(-np.sum(err * err, axis=-1) / sigma)


@dataclass
class CommandRanges:
    lin_vel_x: tuple = (0.8, 1.0)
    lin_vel_y: tuple = (0.0, 0.0)
    ang_vel_z: tuple = (-0.1, 0.1)


def sample_command(rng: np.random.Generator, ranges: CommandRanges = CommandRanges()) -> np.ndarray:
    return np.array([
        rng.uniform(*ranges.lin_vel_x),
        rng.uniform(*ranges.lin_vel_y) if ranges.lin_vel_y[1] > ranges.lin_vel_y[0] else ranges.lin_vel_y[0],
        rng.uniform(*ranges.ang_vel_z),
    ])


@dataclass
class RewardConfig:
    variant: str = "reward1"
    dt: float = 0.005
    weights: dict = field(default_factory=lambda: dict(REWARD1_WEIGHTS))
    joint_scope: str = "all"  # joint velocity/acceleration over "all" joints or "hip" yaw joints
    air_time_target: float = 0.5

    def __post_init__(self):
        if self.variant not in ("reward1", "reward2"):
            raise ValueError("reward variant must be reward1 or reward2")
        if self.joint_scope not in ("all", "hip"):
            raise ValueError("joint_scope must be 'all' or 'hip'")
        unknown = set(self.weights) - set(REWARD_TERMS)
        if unknown:
            raise ValueError(f"unknown reward terms {sorted(unknown)}")

    @property
    def enabled(self) -> tuple:
        if self.variant == "reward1":
            return REWARD_TERMS
        return tuple(t for t in REWARD_TERMS if t in REWARD2_TERMS)

    def with_variant(self, variant: str) -> "RewardConfig":
        return RewardConfig(variant, self.dt, dict(self.weights), self.joint_scope, self.air_time_target)


class Transition(NamedTuple):
    """Everything the reward terms read, batched over environments."""

    v_body: np.ndarray       # (N, 3)
    w_body: np.ndarray       # (N, 3)
    command: np.ndarray      # (N, 3)
    q: np.ndarray            # (N, 18) relative to the neutral stance
    qd: np.ndarray           # (N, 18)
    qd_prev: np.ndarray      # (N, 18)
    action: np.ndarray       # (N, A)
    last_action: np.ndarray  # (N, A)
    torque: np.ndarray       # (N, 18)
    collisions: np.ndarray   # (N, K) bool
    touchdown_air: np.ndarray  # (N, M) air time of each landing in the step, 0 = no landing
    touchdown: np.ndarray    # (N, M) bool


def reward_terms(tr: Transition, cfg: RewardConfig) -> dict:
    """Unweighted value of every reward term, each of shape (N,)."""
    hip = slice(0, None, 3)
    sel = slice(None) if cfg.joint_scope == "all" else hip
    qdd = (tr.qd - tr.qd_prev) / cfg.dt
    sq = lambda a: np.sum(np.square(a), axis=-1)  # noqa: E731
    return {
        "lin_vel_tracking": tracking_kernel(tr.command[:, :2] - tr.v_body[:, :2]),
        "ang_vel_tracking": tracking_kernel(tr.command[:, 2:3] - tr.w_body[:, 2:3]),
        "lin_vel_z": np.square(tr.v_body[:, 2]),
        "ang_vel_xy": sq(tr.w_body[:, :2]),
        "hip_rotation": sq(tr.q[:, hip]),
        "joint_velocity": sq(tr.qd[:, sel]),
        "joint_acceleration": sq(qdd[:, sel]),
        "action_rate": sq(tr.action - tr.last_action),
        "torque": sq(tr.torque),
        "collision": np.sum(tr.collisions, axis=-1).astype(float),
        "feet_air_time": np.sum(np.where(tr.touchdown, tr.touchdown_air - cfg.air_time_target, 0.0), axis=-1),
    }


def compute_reward(tr: Transition, cfg: RewardConfig):
    """Total reward and the per-term weighted contributions (disabled terms are 0)."""
    terms = reward_terms(tr, cfg)
    enabled = set(cfg.enabled)
    breakdown = {
        name: (cfg.weights[name] * cfg.dt * terms[name]) if name in enabled else np.zeros_like(terms[name])
        for name in REWARD_TERMS
    }
    total = np.zeros_like(terms["lin_vel_tracking"])
    for name in REWARD_TERMS:
        total = total + breakdown[name]
    return total, breakdown


def observe(state: RobotState, last_action, command, q_nominal) -> np.ndarray:
    """Observation layout: v_b (3), w_b (3), q - q_nominal (18), qd (18), gravity in
    body frame (3), last raw action (A), command (3). Velocities are scaled by
    OBS_SCALES; gravity and command are unscaled."""
    R = state.rotation
    v_b = (state.lin_vel[:, None, :] @ R)[:, 0]
    w_b = (state.ang_vel[:, None, :] @ R)[:, 0]
    return np.concatenate(
        [
            v_b * OBS_SCALES["lin_vel"],
            w_b * OBS_SCALES["ang_vel"],
            (state.q - q_nominal) * OBS_SCALES["dof_pos"],
            state.qd * OBS_SCALES["dof_vel"],
            -R[:, 2, :],
            np.asarray(last_action, dtype=float),
            np.asarray(command, dtype=float),
        ],
        axis=1,
    )


@dataclass
class EnvConfig:
    variant: str = "cpg_rl"
    n_envs: int = 64
    seed: int = 0
    terrain: str = "flat"          # flat, uniform, wave, slope or curriculum
    difficulty: float = 1.0        # for uniform / wave / slope
    terrain_size: float = 48.0     # m, side of single-terrain fields
    episode_length_s: float = 20.0
    decimation: int = 5
    h: float = H_DEFAULT
    k2: float = K2_DEFAULT
    action_filter_tau: float = 0.05
    fall_height: float = 0.12
    backend: str = "numba"         # physics kernel, see sim.step_dynamics
    cpg: CpgParams = field(default_factory=CpgParams)
    geometry: LegGeometry = field(default_factory=LegGeometry)
    sim: SimParams = field(default_factory=SimParams)
    gains: PdGains = field(default_factory=PdGains)
    reward: RewardConfig = field(default_factory=RewardConfig)
    commands: CommandRanges = field(default_factory=CommandRanges)

    @property
    def policy_dt(self) -> float:
        return self.sim.dt * self.decimation

    @property
    def max_episode_steps(self) -> int:
        return int(round(self.episode_length_s / self.policy_dt))


def build_terrain(cfg: EnvConfig):
    """TerrainSet, per-env terrain index and optional curriculum for a config."""
    if cfg.terrain == "curriculum":
        grid = build_curriculum(cfg.seed)
        return TerrainSet([grid.heightfield]), np.zeros(cfg.n_envs, dtype=int), grid
    if cfg.terrain == "flat":
        field_ = flat()
    else:
        field_ = make_terrain(cfg.terrain, cfg.difficulty, seed=cfg.seed, size=cfg.terrain_size)
    return TerrainSet([field_]), np.zeros(cfg.n_envs, dtype=int), None


class EpisodeStats(NamedTuple):
    env_ids: np.ndarray
    returns: np.ndarray
    lengths: np.ndarray
    success: np.ndarray
    tracking_error: np.ndarray  # mean |v_cmd - v_b| over xy
    mean_speed: np.ndarray


class HexapodEnv:
    """Vectorised environments stepped at the policy rate.

    Each policy step decodes the action, then runs ``decimation`` physics steps,
    each advancing the low-pass filtered mapping parameters, the CPG, the
    mapping + IK and the PD loop.
    """

    def __init__(self, cfg: EnvConfig, terrains: TerrainSet = None, terrain_idx=None,
                 curriculum: CurriculumGrid = None, spawn_xy=None):
        self.cfg = cfg
        if terrains is None:
            terrains, terrain_idx, curriculum = build_terrain(cfg)
        self.terrains = terrains
        self.terrain_idx = np.asarray(terrain_idx, dtype=int)
        self.curriculum = curriculum
        self.n = cfg.n_envs
        self.low, self.high = action_bounds(cfg.variant)
        self.num_actions = len(self.low)
        self.num_obs = obs_dim(cfg.variant)
        self.geom = cfg.geometry
        self.q_nominal = nominal_joint_angles(self.geom, cfg.h).reshape(-1)
        self.nominal_foot = self.geom.nominal_foot()
        self.max_episode_steps = cfg.max_episode_steps
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(self.n)]
        self.spawn_xy = np.zeros((self.n, 2)) if spawn_xy is None else np.asarray(spawn_xy, dtype=float)
        if curriculum is not None:
            rows, _ = curriculum.shape
            self.rows = np.arange(self.n) % rows
            self.levels = np.zeros(self.n, dtype=int)
        self._alloc()
        self.reset()

    def _alloc(self):
        n = self.n
        z = lambda *s: np.zeros((n,) + s)  # noqa: E731
        self.state = RobotState(z(3), np.tile([1.0, 0, 0, 0], (n, 1)), z(3), z(3), z(N_JOINTS), z(N_JOINTS))
        self.osc = NetworkState(z(N_LEGS), z(N_LEGS))
        self.targets = z(self.num_actions)
        self.filtered = z(self.num_actions)
        self.last_action = z(self.num_actions)
        self.command = z(3)
        self.episode_step = np.zeros(n, dtype=int)
        self.episode_return = z()
        self.episode_track_err = z()
        self.episode_start_xy = z(2)
        self.torque = z(N_JOINTS)

    # -- resets --------------------------------------------------------------
    def reset(self):
        self.reset_idx(np.arange(self.n))
        return self.observe()

    def reset_idx(self, env_ids):
        cfg = self.cfg
        neutral = decode_action(np.zeros(self.num_actions), self.low, self.high)
        for i in env_ids:
            rng = self.rngs[i]
            if self.curriculum is not None:
                xy = np.array(self.curriculum.block_center(self.rows[i], self.levels[i]))
            else:
                xy = self.spawn_xy[i]
            st = reset_env(self.terrains, self.terrain_idx[i], self.geom, cfg.h, xy, rng)
            self.state.assign(i, st)
            self.command[i] = sample_command(rng, cfg.commands)
            osc = cpg.initial_state(rng, phases=cpg_phases(cfg.cpg))
            self.osc.x[i] = osc.x
            self.osc.y[i] = osc.y
        self.targets[env_ids] = neutral
        self.filtered[env_ids] = neutral
        self.last_action[env_ids] = 0.0
        self.torque[env_ids] = 0.0
        self.episode_step[env_ids] = 0
        self.episode_return[env_ids] = 0.0
        self.episode_track_err[env_ids] = 0.0
        self.episode_start_xy[env_ids] = self.state.pos[env_ids, :2]

    def _update_curriculum(self, env_ids):
        dist = np.linalg.norm(self.state.pos[env_ids, :2] - self.episode_start_xy[env_ids], axis=1)
        elapsed = self.episode_step[env_ids] * self.cfg.policy_dt
        cmd_dist = np.linalg.norm(self.command[env_ids, :2], axis=1) * elapsed
        up = dist > 0.5 * self.curriculum.block_size
        down = (dist < 0.5 * cmd_dist) & ~up
        _, cols = self.curriculum.shape
        self.levels[env_ids] = np.clip(self.levels[env_ids] + up.astype(int) - down.astype(int), 0, cols - 1)

    # -- stepping ------------------------------------------------------------
    def observe(self):
        return observe(self.state, self.last_action, self.command, self.q_nominal)

    def foot_targets(self):
        """Desired joint angles (N, 18) from the current filtered action and oscillators."""
        cfg = self.cfg
        if cfg.variant == "cpg_rl":
            k1, d_step, phi = split_cpg_action(self.filtered)
            offsets = map_feet(self.osc.x, self.osc.y, d_step, k1, phi, cfg.h, cfg.k2)
            target = self.nominal_foot + offsets
        else:
            p = self.filtered.reshape(-1, N_LEGS, 3)
            target = self.nominal_foot + np.concatenate([p[..., :2], np.zeros_like(p[..., 2:])], -1)
            target[..., 2] = p[..., 2]
        q = inverse_kinematics(self.geom, body_to_leg(self.geom, target), strict=False)
        return q.reshape(-1, N_JOINTS)

    def step(self, actions):
        cfg = self.cfg
        actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        self.targets = decode_action(actions, self.low, self.high)
        alpha = min(1.0, cfg.sim.dt / cfg.action_filter_tau) if cfg.action_filter_tau > 0 else 1.0
        qd_prev = self.state.qd.copy()
        touchdown = np.zeros((self.n, cfg.decimation, N_LEGS), dtype=bool)
        touchdown_air = np.zeros((self.n, cfg.decimation, N_LEGS))
        diverged = np.zeros(self.n, dtype=bool)
        for k in range(cfg.decimation):
            self.filtered += alpha * (self.targets - self.filtered)
            if cfg.variant == "cpg_rl":
                self.osc = cpg.step_network(self.osc, cfg.cpg, cfg.sim.dt)
            q_des = self.foot_targets()
            self.torque = pd_torque(q_des, self.state.q, self.state.qd, cfg.gains)
            self.state, rep = step_dynamics(
                self.state, self.torque, self.terrains, self.terrain_idx, self.geom, cfg.sim,
                raise_on_divergence=False, check_collision=False, backend=cfg.backend,
            )
            touchdown[:, k] = rep.touchdown
            touchdown_air[:, k] = rep.touchdown_air_time
            diverged |= rep.diverged
        if diverged.any():
            self._sanitize(diverged)
        collisions = detect_collision(self.state, self.terrains, self.terrain_idx, self.geom, cfg.sim)
        R = self.state.rotation
        v_b = (self.state.lin_vel[:, None, :] @ R)[:, 0]
        w_b = (self.state.ang_vel[:, None, :] @ R)[:, 0]
        tr = Transition(
            v_b, w_b, self.command, self.state.q - self.q_nominal, self.state.qd, qd_prev,
            actions, self.last_action, self.torque, collisions,
            touchdown_air.reshape(self.n, -1), touchdown.reshape(self.n, -1),
        )
        reward, terms = compute_reward(tr, cfg.reward)
        reward = np.where(diverged, 0.0, reward)
        self.last_action = actions.copy()
        self.episode_step += 1
        self.episode_return += reward
        self.episode_track_err += np.linalg.norm(self.command[:, :2] - v_b[:, :2], axis=1)

        ground = self.terrains.height_at(self.terrain_idx, self.state.pos[:, 0], self.state.pos[:, 1])
        fell = self.state.pos[:, 2] - ground < cfg.fall_height
        failed = collisions[:, 0] | fell | diverged
        time_out = (self.episode_step >= self.max_episode_steps) & ~failed
        done = failed | time_out

        info = {"terms": terms, "time_out": time_out, "success": time_out.copy(), "failed": failed,
                "tracking_error": np.linalg.norm(self.command[:, :2] - v_b[:, :2], axis=1)}
        env_ids = np.flatnonzero(done)
        if len(env_ids):
            # observation of the final state, for bootstrapping time-outs
            info["terminal_obs"] = self.observe()
            steps = self.episode_step[env_ids]
            dist = np.linalg.norm(self.state.pos[env_ids, :2] - self.episode_start_xy[env_ids], axis=1)
            info["episodes"] = EpisodeStats(
                env_ids, self.episode_return[env_ids].copy(), steps.copy(), time_out[env_ids].copy(),
                self.episode_track_err[env_ids] / steps, dist / (steps * cfg.policy_dt),
            )
            if self.curriculum is not None:
                self._update_curriculum(env_ids)
            self.reset_idx(env_ids)
        return self.observe(), reward, done, info

    def _sanitize(self, mask):
        # diverged envs are reset right after this step; keep their numbers finite until then
        for f in ("pos", "lin_vel", "ang_vel", "q", "qd"):
            arr = getattr(self.state, f)
            arr[mask] = np.nan_to_num(arr[mask], nan=0.0, posinf=0.0, neginf=0.0)
        self.state.quat[mask] = [1.0, 0.0, 0.0, 0.0]


def cpg_phases(p: CpgParams) -> np.ndarray:
    """Leg phases consistent with theta, taking leg 0 as the reference."""
    return cpg.wrap_angle(p.theta[:, 0])
