"""PPO with a Gaussian MLP actor-critic, GAE and a KL-adaptive learning rate."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from safetensors.torch import load_file, safe_open, save_file
from torch import nn

from .mdp import REWARD_TERMS, EnvConfig, HexapodEnv
from .terrain import EVAL_WAVE_AMPLITUDE, MAX_SLOPE, MAX_UNIFORM_RANGE, TerrainSet, make_terrain

CHECKPOINT_FORMAT = "hexcpg-policy"
CHECKPOINT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class PpoConfig:
    n_envs: int = 64
    rollout_horizon: int = 24
    minibatch_size: int = 384  # n_envs x 6, as at full scale
    n_epochs: int = 5
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    gamma: float = 0.99
    gae_lambda: float = 0.95
    desired_kl: float = 0.01
    lr: float = 1e-3
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    lr_factor: float = 1.5
    max_grad_norm: float = 1.0
    hidden: tuple = (128, 64)
    init_log_std: float = -1.0
    n_updates: int = 300
    checkpoint_every: int = 100

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.rollout_horizon

    @property
    def n_minibatches(self) -> int:
        return self.batch_size // self.minibatch_size

    def validate(self):
        if min(self.n_envs, self.rollout_horizon, self.minibatch_size, self.n_epochs) < 1:
            raise ValueError("n_envs, rollout_horizon, minibatch_size and n_epochs must be >= 1")
        if self.batch_size % self.minibatch_size:
            raise ValueError(
                f"minibatch_size {self.minibatch_size} does not divide batch_size {self.batch_size}"
            )
        if not 0 < self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("need 0 < gamma <= 1 and 0 <= gae_lambda <= 1")
        if self.clip <= 0 or self.desired_kl <= 0 or self.lr <= 0:
            raise ValueError("clip, desired_kl and lr must be positive")
        if not self.lr_min <= self.lr <= self.lr_max:
            raise ValueError("lr must lie in [lr_min, lr_max]")
        if not self.hidden:
            raise ValueError("need at least one hidden layer")


def _mlp(sizes, out_gain=1.0):
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [nn.Linear(a, b), nn.ELU()]
    head = nn.Linear(sizes[-2], sizes[-1])
    with torch.no_grad():
        head.weight.mul_(out_gain)
        head.bias.zero_()
    return nn.Sequential(*layers, head)


class ActorCritic(nn.Module):
    """Separate actor and critic MLPs of the same shape, diagonal Gaussian policy
    with a state-independent log-std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(128, 64), init_log_std: float = -1.0):
        super().__init__()
        self.obs_dim, self.act_dim, self.hidden = obs_dim, act_dim, tuple(hidden)
        self.actor = _mlp([obs_dim, *hidden, act_dim], out_gain=0.01)
        self.critic = _mlp([obs_dim, *hidden, 1])
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std)))

    def forward(self, obs):
        """(mean, std, value) for a batch of observations."""
        mean = self.actor(obs)
        return mean, self.log_std.exp().expand_as(mean), self.critic(obs)[..., 0]

    def distribution(self, obs):
        mean, std, value = self(obs)
        return torch.distributions.Normal(mean, std), value

    @torch.no_grad()
    def act(self, obs, deterministic: bool = False, generator=None):
        mean, std, value = self(obs)
        if deterministic:
            action = mean
        else:
            action = mean + std * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        logp = torch.distributions.Normal(mean, std).log_prob(action).sum(-1)
        return action, logp, value, mean, std

    @torch.no_grad()
    def value(self, obs):
        return self.critic(obs)[..., 0]


def policy_forward(net: ActorCritic, obs):
    """Gaussian parameters and state values for ``obs`` of shape (N, obs_dim)."""
    obs = torch.as_tensor(obs, dtype=next(net.parameters()).dtype)
    return net(obs)


# -- rollouts ------------------------------------------------------------------
class RolloutBatch(NamedTuple):
    obs: torch.Tensor        # (T, N, obs_dim)
    actions: torch.Tensor    # (T, N, act_dim)
    log_probs: torch.Tensor  # (T, N)
    values: torch.Tensor     # (T, N)
    rewards: torch.Tensor    # (T, N), time-out bootstrap already folded in
    dones: torch.Tensor      # (T, N)
    mu: torch.Tensor         # (T, N, act_dim) collector action means
    sigma: torch.Tensor      # (T, N, act_dim)
    last_values: torch.Tensor  # (N,)

    @property
    def horizon(self):
        return self.obs.shape[0]

    @property
    def n_envs(self):
        return self.obs.shape[1]


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates over a (T, N) rollout.

    ``dones[t]`` marks that the episode ended after step t, so step t does not
    bootstrap from ``values[t + 1]``. Returns (advantages, returns).
    """
    rewards = torch.as_tensor(rewards)
    values = torch.as_tensor(values, dtype=rewards.dtype)
    dones = torch.as_tensor(dones, dtype=rewards.dtype)
    last_values = torch.as_tensor(last_values, dtype=rewards.dtype)
    T = rewards.shape[0]
    adv = torch.zeros_like(rewards)
    gae = torch.zeros_like(last_values)
    for t in reversed(range(T)):
        next_v = last_values if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
    return adv, adv + values


class RolloutStats(NamedTuple):
    mean_reward: float
    term_means: dict
    episode_returns: list
    episode_tracking: list
    episode_success: list


def collect_rollout(env: HexapodEnv, net: ActorCritic, horizon: int, obs, generator=None, gamma: float = 0.99):
    """Step every environment ``horizon`` times with sampled actions.

    ``obs`` is the current observation array; returns the batch, the
    observation to continue from, and per-rollout statistics. Time-outs are
    bootstrapped by adding gamma * V(final observation) to the last reward.
    """
    T = horizon
    raw_reward = 0.0
    buf = {k: [] for k in ("obs", "actions", "log_probs", "values", "rewards", "dones", "mu", "sigma")}
    term_sums = {k: 0.0 for k in REWARD_TERMS}
    ep_ret, ep_track, ep_succ = [], [], []
    o = torch.as_tensor(obs, dtype=torch.float32)
    for _ in range(T):
        action, logp, value, mu, sigma = net.act(o, generator=generator)
        next_obs, reward, done, info = env.step(action.numpy().astype(float))
        raw_reward += float(np.mean(reward))
        reward = torch.as_tensor(reward, dtype=torch.float32)
        if info["time_out"].any():
            term = torch.as_tensor(info["terminal_obs"], dtype=torch.float32)
            reward = reward + gamma * net.value(term) * torch.as_tensor(info["time_out"], dtype=torch.float32)
        for k, v in zip(buf, (o, action, logp, value, reward, torch.as_tensor(done, dtype=torch.float32), mu, sigma)):
            buf[k].append(v)
        for k in REWARD_TERMS:
            term_sums[k] += float(np.mean(info["terms"][k]))
        if "episodes" in info:
            ep = info["episodes"]
            ep_ret += ep.returns.tolist()
            ep_track += ep.tracking_error.tolist()
            ep_succ += ep.success.tolist()
        o = torch.as_tensor(next_obs, dtype=torch.float32)
    stacked = {k: torch.stack(v) for k, v in buf.items()}
    batch = RolloutBatch(last_values=net.value(o), **stacked)
    stats = RolloutStats(
        raw_reward / T,
        {k: v / T for k, v in term_sums.items()}, ep_ret, ep_track, ep_succ,
    )
    return batch, next_obs, stats


# -- update --------------------------------------------------------------------
def clipped_surrogate(log_probs, old_log_probs, advantages, clip: float):
    """Mean PPO clipped objective (to maximize) and the fraction of clipped samples."""
    ratio = torch.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages
    objective = torch.minimum(unclipped, clipped).mean()
    clip_frac = ((ratio - 1.0).abs() > clip).to(advantages.dtype).mean()
    return objective, clip_frac


def clipped_value_loss(values, old_values, returns, clip: float):
    v_clipped = old_values + torch.clamp(values - old_values, -clip, clip)
    return torch.maximum((values - returns) ** 2, (v_clipped - returns) ** 2).mean()


def normalize_advantages(adv, eps: float = 1e-8):
    return (adv - adv.mean()) / (adv.std() + eps)


def gaussian_kl(mu0, sigma0, mu1, sigma1):
    """KL(N0 || N1) summed over the action axis."""
    return (
        torch.log(sigma1 / sigma0) + (sigma0**2 + (mu0 - mu1) ** 2) / (2.0 * sigma1**2) - 0.5
    ).sum(-1)


def ppo_loss(net: ActorCritic, mb: dict, cfg: PpoConfig):
    """Total loss and its parts on one minibatch of flattened samples."""
    dist, values = net.distribution(mb["obs"])
    log_probs = dist.log_prob(mb["actions"]).sum(-1)
    entropy = dist.entropy().sum(-1).mean()
    surrogate, clip_frac = clipped_surrogate(log_probs, mb["log_probs"], mb["advantages"], cfg.clip)
    value_loss = clipped_value_loss(values, mb["values"], mb["returns"], cfg.clip)
    loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    return loss, {
        "surrogate": surrogate, "value_loss": value_loss, "entropy": entropy, "clip_frac": clip_frac,
        "mean": dist.mean, "std": dist.stddev,
    }


def adapt_lr(lr: float, kl: float, cfg: PpoConfig) -> float:
    if kl > 2.0 * cfg.desired_kl:
        lr = lr / cfg.lr_factor
    elif kl < 0.5 * cfg.desired_kl:
        lr = lr * cfg.lr_factor
    return float(min(max(lr, cfg.lr_min), cfg.lr_max))


def make_optimizer(net: ActorCritic, cfg: PpoConfig):
    return torch.optim.Adam(net.parameters(), lr=cfg.lr)


def ppo_update(net: ActorCritic, optimizer, batch: RolloutBatch, cfg: PpoConfig, generator=None):
    """Several epochs of minibatch PPO on ``batch``. Updates ``net`` in place.

    On a non-finite loss the network and optimizer are restored to their state
    before the call and NonFiniteLoss is raised.
    """
    T, N = batch.horizon, batch.n_envs
    if T * N != cfg.batch_size:
        raise ValueError(f"batch has {T * N} samples, config expects {cfg.batch_size}")
    adv, returns = compute_gae(batch.rewards, batch.values, batch.dones, batch.last_values,
                               cfg.gamma, cfg.gae_lambda)
    flat = {
        "obs": batch.obs.reshape(T * N, -1), "actions": batch.actions.reshape(T * N, -1),
        "log_probs": batch.log_probs.reshape(-1), "values": batch.values.reshape(-1),
        "returns": returns.reshape(-1), "advantages": normalize_advantages(adv.reshape(-1)),
        "mu": batch.mu.reshape(T * N, -1), "sigma": batch.sigma.reshape(T * N, -1),
    }
    net_backup = {k: v.clone() for k, v in net.state_dict().items()}
    opt_backup = _clone_opt_state(optimizer.state_dict())
    lr = optimizer.param_groups[0]["lr"]
    sums = {"surrogate": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0, "kl": 0.0}
    n = 0
    for _ in range(cfg.n_epochs):
        perm = torch.randperm(cfg.batch_size, generator=generator)
        for start in range(0, cfg.batch_size, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            mb = {k: v[idx] for k, v in flat.items()}
            loss, parts = ppo_loss(net, mb, cfg)
            if not torch.isfinite(loss):
                net.load_state_dict(net_backup)
                optimizer.load_state_dict(opt_backup)
                raise NonFiniteLoss("non-finite PPO loss; update rolled back")
            with torch.no_grad():
                kl = gaussian_kl(mb["mu"], mb["sigma"], parts["mean"], parts["std"]).mean().item()
            lr = adapt_lr(lr, kl, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k in ("surrogate", "value_loss", "entropy", "clip_frac"):
                sums[k] += parts[k].item()
            sums["kl"] += kl
            n += 1
    if not all(torch.isfinite(p).all() for p in net.parameters()):
        net.load_state_dict(net_backup)
        optimizer.load_state_dict(opt_backup)
        raise NonFiniteLoss("non-finite parameters after update; update rolled back")
    stats = {k: v / n for k, v in sums.items()}
    stats["lr"] = lr
    return net, stats


def _clone_opt_state(sd):
    def clone(x):
        if isinstance(x, torch.Tensor):
            return x.clone()
        if isinstance(x, dict):
            return {k: clone(v) for k, v in x.items()}
        if isinstance(x, list):
            return [clone(v) for v in x]
        return x
    return clone(sd)


# -- evaluation ----------------------------------------------------------------
class EvalResult(NamedTuple):
    success_rate: float
    tracking_error: float
    mean_return: float
    n_episodes: int


class EpisodeResults(NamedTuple):
    success: np.ndarray         # (E,) bool
    tracking_error: np.ndarray  # (E,) mean |v_cmd - v_b| over the episode
    returns: np.ndarray
    lengths: np.ndarray         # policy steps


def as_policy(net) -> Callable:
    """Wrap a network as a deterministic obs -> action function; callables pass through."""
    if isinstance(net, ActorCritic):
        def policy(obs):
            with torch.no_grad():
                mean, _, _ = policy_forward(net, obs)
            return mean.numpy().astype(float)
        return policy
    return net


def run_episodes(net, env_cfg: EnvConfig, n_episodes: int, terrains=None, terrain_idx=None,
                 spawn_xy=None) -> EpisodeResults:
    """One deterministic episode in each of ``n_episodes`` side-by-side environments.

    An episode succeeds if it lasts the full episode length without a base
    collision (a fall or a numerical failure also ends it unsuccessfully).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    cfg = EnvConfig(**{**_shallow(env_cfg), "n_envs": n_episodes})
    if terrains is None:
        env = HexapodEnv(cfg, spawn_xy=spawn_xy)
    else:
        env = HexapodEnv(cfg, terrains, terrain_idx, spawn_xy=spawn_xy)
    policy = as_policy(net)
    obs = env.observe()
    finished = np.zeros(n_episodes, dtype=bool)
    res = EpisodeResults(np.zeros(n_episodes, dtype=bool), np.zeros(n_episodes), np.zeros(n_episodes),
                         np.zeros(n_episodes, dtype=int))
    while not finished.all():
        obs, _, _, info = env.step(policy(obs))
        if "episodes" in info:
            ep = info["episodes"]
            new = ~finished[ep.env_ids]
            ids = ep.env_ids[new]
            res.success[ids] = ep.success[new]
            res.tracking_error[ids] = ep.tracking_error[new]
            res.returns[ids] = ep.returns[new]
            res.lengths[ids] = ep.lengths[new]
            finished[ids] = True
    return res


def evaluate_success(net, env_cfg: EnvConfig, n_episodes: int, terrains=None, terrain_idx=None,
                     spawn_xy=None) -> EvalResult:
    """Fraction of successful deterministic episodes, with mean tracking error and return."""
    r = run_episodes(net, env_cfg, n_episodes, terrains, terrain_idx, spawn_xy)
    return EvalResult(float(r.success.mean()), float(r.tracking_error.mean()), float(r.returns.mean()), n_episodes)


def difficulty_levels(levels: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, levels)


def sweep_difficulty(net, env_cfg: EnvConfig, kind: str, levels: int = 5, n_episodes: int = 20,
                     seed: int = 0, spawn_spacing: float = 0.0) -> list:
    """Success rate and tracking error at each difficulty level of one terrain type.

    All levels run in one batch: level ``i`` lives in field ``i`` of a terrain set.
    Returns one dict per level.
    """
    diffs = difficulty_levels(levels)
    fields = [make_terrain(kind, d, seed=seed + i, size=env_cfg.terrain_size) for i, d in enumerate(diffs)]
    ts = TerrainSet(fields)
    idx = np.repeat(np.arange(levels), n_episodes)
    spawn = np.zeros((len(idx), 2))
    if spawn_spacing > 0:
        spawn[:, 1] = spawn_spacing * (np.tile(np.arange(n_episodes), levels) - 0.5 * (n_episodes - 1))
    cfg = EnvConfig(**{**_shallow(env_cfg), "terrain": kind, "seed": seed})
    r = run_episodes(net, cfg, len(idx), ts, idx, spawn)
    rows = []
    for i, d in enumerate(diffs):
        m = idx == i
        rows.append({
            "terrain": kind, "difficulty": float(d), "parameter": terrain_parameter(kind, d),
            "success_rate": float(r.success[m].mean()), "tracking_error": float(r.tracking_error[m].mean()),
            "mean_return": float(r.returns[m].mean()), "n_episodes": int(m.sum()),
        })
    return rows


def terrain_parameter(kind: str, difficulty: float) -> float:
    """Physical value at a difficulty: slope in degrees, wave amplitude in m, or the
    peak-to-peak height difference of uniform noise in m."""
    if kind == "slope":
        return float(np.rad2deg(MAX_SLOPE * difficulty))
    if kind == "wave":
        return float(EVAL_WAVE_AMPLITUDE * difficulty)
    if kind == "uniform":
        return float(2.0 * MAX_UNIFORM_RANGE * difficulty)
    return 0.0


def _shallow(dc):
    return {f: getattr(dc, f) for f in dc.__dataclass_fields__}


# -- checkpoints ---------------------------------------------------------------
def save_checkpoint(path, net: ActorCritic, meta: dict = None):
    """safetensors file: the parameter tensors plus string metadata holding the
    format tag, version, network shape and any run information in ``meta``."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": str(CHECKPOINT_VERSION),
        "obs_dim": str(net.obs_dim),
        "act_dim": str(net.act_dim),
        "hidden": json.dumps(list(net.hidden)),
    }
    if meta:
        header["meta"] = json.dumps(meta)
    tensors = {k: v.detach().contiguous() for k, v in net.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=header)


def load_checkpoint(path):
    """Returns (net, meta). Raises CheckpointError on a foreign or newer file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            header = f.metadata() or {}
    except Exception as e:  # safetensors raises its own error types
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if header.get("version") != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    net = ActorCritic(int(header["obs_dim"]), int(header["act_dim"]), json.loads(header["hidden"]))
    net.load_state_dict(load_file(str(path)))
    return net, json.loads(header.get("meta", "{}"))


# -- training loop ---------------------------------------------------------------
METRIC_COLUMNS = (
    ["update", "mean_reward"] + [f"term_{k}" for k in REWARD_TERMS]
    + ["kl", "clip_frac", "lr", "surrogate", "value_loss", "entropy",
       "episodes", "episode_return", "tracking_error", "success_rate", "curriculum_level"]
)


@dataclass
class TrainResult:
    net: ActorCritic
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def train(env_cfg: EnvConfig, cfg: PpoConfig, seed: int = 0, out_dir=None, meta: dict = None,
          n_updates: int = None, log: Callable = None) -> TrainResult:
    """Run PPO. With ``out_dir`` set, metrics go to ``metrics.csv`` and
    checkpoints to ``checkpoint_XXXXX.safetensors`` plus ``policy.safetensors``."""
    n_updates = cfg.n_updates if n_updates is None else n_updates
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    env_cfg = EnvConfig(**{**_shallow(env_cfg), "n_envs": cfg.n_envs, "seed": seed})
    env = HexapodEnv(env_cfg)
    net = ActorCritic(env.num_obs, env.num_actions, cfg.hidden, cfg.init_log_std)
    opt = make_optimizer(net, cfg)
    result = TrainResult(net)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
    obs = env.observe()
    try:
        for u in range(n_updates):
            batch, obs, rs = collect_rollout(env, net, cfg.rollout_horizon, obs, gen, cfg.gamma)
            _, st = ppo_update(net, opt, batch, cfg, gen)
            row = {
                "update": u, "mean_reward": rs.mean_reward,
                **{f"term_{k}": v for k, v in rs.term_means.items()},
                **{k: st[k] for k in ("kl", "clip_frac", "lr", "surrogate", "value_loss", "entropy")},
                "episodes": len(rs.episode_returns),
                "episode_return": float(np.mean(rs.episode_returns)) if rs.episode_returns else float("nan"),
                "tracking_error": float(np.mean(rs.episode_tracking)) if rs.episode_tracking else float("nan"),
                "success_rate": float(np.mean(rs.episode_success)) if rs.episode_success else float("nan"),
                "curriculum_level": float(env.levels.mean()) if env.curriculum is not None else float("nan"),
            }
            result.history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
                if cfg.checkpoint_every and (u + 1) % cfg.checkpoint_every == 0:
                    p = out_dir / f"checkpoint_{u + 1:05d}.safetensors"
                    save_checkpoint(p, net, {**(meta or {}), "update": u + 1})
                    result.checkpoints.append(p)
            if log is not None:
                log(row)
        if out_dir is not None:
            p = out_dir / "policy.safetensors"
            save_checkpoint(p, net, {**(meta or {}), "update": n_updates})
            result.checkpoints.append(p)
    finally:
        if writer is not None:
            fh.close()
    return result
