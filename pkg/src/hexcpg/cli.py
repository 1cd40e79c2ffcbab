"""hexcpg command line: train, eval, gait-check, export.

Every command writes tidy CSVs into ``--out`` together with the resolved
``config.yaml`` it ran with. Exit codes: 0 ok, 2 bad config or input file,
1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import cpg
from .config import REWARDS, TRAIN_TERRAINS, VARIANTS, ConfigError, RunConfig, load_config, save_config, to_dict
from .cpg import LEGS, N_LEGS
from .mapping import map_feet
from .mdp import (
    REWARD_TERMS, EnvConfig, HexapodEnv, action_bounds, cpg_phases, decode_action, obs_dim, split_cpg_action,
)
from .ppo import CheckpointError, as_policy, load_checkpoint, sweep_difficulty, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("hexcpg")


def _overrides(args) -> dict:
    ov = {}
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    if getattr(args, "variant", None):
        ov["env.variant"] = args.variant
    if getattr(args, "reward", None):
        ov["env.reward.variant"] = args.reward
    if getattr(args, "terrain", None) and args.command in ("train", "export"):
        ov["env.terrain"] = args.terrain
    if getattr(args, "out", None):
        ov["out_dir"] = args.out
    if getattr(args, "updates", None) is not None:
        ov["ppo.n_updates"] = args.updates
    if getattr(args, "episodes", None) is not None:
        ov["eval.n_episodes"] = args.episodes
    if getattr(args, "levels", None) is not None:
        ov["eval.levels"] = args.levels
    return ov


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def _policy_from_checkpoint(path, cfg: RunConfig):
    """Load a checkpoint and make the run config agree with the variant it was trained on."""
    net, meta = load_checkpoint(path)
    variant = meta.get("variant")
    if variant is None:
        raise CheckpointError(f"{path}: no variant recorded in checkpoint")
    if variant != cfg.env.variant:
        log.info("checkpoint variant %s overrides config variant %s", variant, cfg.env.variant)
        cfg = dataclasses.replace(cfg, env=dataclasses.replace(cfg.env, variant=variant))
    if net.obs_dim != obs_dim(variant) or net.act_dim != len(action_bounds(variant)[0]):
        raise CheckpointError(f"{path}: network shape does not match variant {variant}")
    return as_policy(net), cfg


def neutral_policy(variant: str):
    """Constant mid-range action: the open-loop gait for cpg_rl, the neutral stance for rl_baseline."""
    n_act = len(action_bounds(variant)[0])
    return lambda obs: np.zeros((len(obs), n_act))


# -- commands ----------------------------------------------------------------------
def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    save_config(cfg, out / "config.yaml")
    meta = {"variant": cfg.env.variant, "reward": cfg.env.reward.variant, "seed": cfg.seed,
            "config": to_dict(cfg)}

    def progress(row):
        if row["update"] % 10 == 0 or row["update"] == cfg.ppo.n_updates - 1:
            log.info("update %4d  reward/step %.5f  kl %.4f  lr %.2e", row["update"], row["mean_reward"],
                     row["kl"], row["lr"])

    res = train(cfg.env_config(), cfg.ppo, seed=cfg.seed, out_dir=out, meta=meta, log=progress)
    log.info("wrote %s and %d checkpoints", out / "metrics.csv", len(res.checkpoints))
    return EXIT_OK


EVAL_COLUMNS = ["terrain", "difficulty", "parameter", "success_rate", "tracking_error", "mean_return", "n_episodes"]


def cmd_eval(cfg: RunConfig, checkpoint=None, terrains=None) -> int:
    if terrains and "curriculum" in terrains:
        raise ConfigError("eval: the difficulty sweep needs a single terrain type, not curriculum")
    if checkpoint is None:
        policy, run_cfg = neutral_policy(cfg.env.variant), cfg
    else:
        policy, run_cfg = _policy_from_checkpoint(checkpoint, cfg)
    out = _out_dir(run_cfg)
    save_config(run_cfg, out / "config.yaml")
    rows = []
    for kind in terrains or run_cfg.eval.terrains:
        rows += sweep_difficulty(policy, run_cfg.env, kind, run_cfg.eval.levels, run_cfg.eval.n_episodes,
                                 seed=run_cfg.seed, spawn_spacing=run_cfg.eval.spawn_spacing)
        for r in rows[-run_cfg.eval.levels:]:
            log.info("%-8s difficulty %.2f  success %.2f  tracking error %.3f", r["terrain"], r["difficulty"],
                     r["success_rate"], r["tracking_error"])
    _write_csv(out / "eval.csv", rows, EVAL_COLUMNS)
    return EXIT_OK


GAIT_COLUMNS = ["quantity", "legs", "measured", "target", "error", "ok"]
PHASE_TOL = 0.05


def gait_report(cfg: RunConfig, seconds: float = 10.0, settle: float = 5.0) -> list:
    """Open-loop CPG with the constant mid-range action.

    Rows cover all 15 leg pairs (phase differences), per-leg duty factors
    (fraction of the cycle with y < 0, i.e. stance) and swing clearances
    (peak foot lift above stance height). The clearance target is k1 * r*,
    with r* the locked amplitude where the radial Hopf term balances the
    coupling push of the five other oscillators, alpha (mu^2 - r^2) r + 5 k = 0;
    with k = 5 that is about 1.107 mu, not mu.
    """
    p = cfg.env.cpg
    dt = cfg.env.sim.dt
    rng = np.random.default_rng(cfg.seed)
    state = cpg.initial_state(rng, phases=cpg_phases(p))
    state = cpg.simulate(state, p, settle, dt)
    low, high = action_bounds("cpg_rl")
    k1, d_step, phi = split_cpg_action(decode_action(np.zeros(len(low)), low, high))
    n = int(round(seconds / dt))
    xs, ys = np.empty((n, N_LEGS)), np.empty((n, N_LEGS))
    for i in range(n):
        state = cpg.step_network(state, p, dt)
        xs[i], ys[i] = state.x, state.y
    rows = []
    ph = cpg.phase_of(xs[-1], ys[-1])
    for i, j in itertools.combinations(range(N_LEGS), 2):
        measured = float(cpg.wrap_angle(ph[i] - ph[j]))
        target = float(cpg.wrap_angle(p.theta[i, j]))
        err = float(abs(cpg.wrap_angle(measured - target)))
        rows.append(dict(quantity="phase_difference", legs=f"{LEGS[i]}-{LEGS[j]}", measured=measured,
                         target=target, error=err, ok=err < PHASE_TOL))
    duty = (ys < 0).mean(axis=0)
    amp = locked_amplitude(p)
    feet = map_feet(xs, ys, d_step, k1, phi, cfg.env.h, cfg.env.k2)
    lift = feet[..., 2].max(axis=0) + cfg.env.h
    for leg in range(N_LEGS):
        rows.append(dict(quantity="duty_factor", legs=LEGS[leg], measured=float(duty[leg]), target=0.5,
                         error=float(abs(duty[leg] - 0.5)), ok=abs(duty[leg] - 0.5) < 0.02))
    for leg in range(N_LEGS):
        target = float(k1[leg] * amp)
        err = float(abs(lift[leg] - target))
        rows.append(dict(quantity="swing_clearance", legs=LEGS[leg], measured=float(lift[leg]), target=target,
                         error=err, ok=err < 0.05 * target))
    return rows


def locked_amplitude(p) -> float:
    """Positive root of alpha (mu^2 - r^2) r + (N - 1) k = 0."""
    roots = np.roots([-p.alpha, 0.0, p.alpha * p.mu**2, (N_LEGS - 1) * p.k])
    real = roots[np.abs(roots.imag) < 1e-9].real
    return float(real[real > 0].max())


def cmd_gait_check(cfg: RunConfig, seconds: float = 10.0) -> int:
    out = _out_dir(cfg)
    save_config(cfg, out / "config.yaml")
    rows = gait_report(cfg, seconds)
    _write_csv(out / "gait.csv", rows, GAIT_COLUMNS)
    for q in ("phase_difference", "duty_factor", "swing_clearance"):
        sel = [r for r in rows if r["quantity"] == q]
        log.info("%-16s %2d rows  max error %.4f  %s", q, len(sel), max(r["error"] for r in sel),
                 "ok" if all(r["ok"] for r in sel) else "OFF TARGET")
    return EXIT_OK


def trajectory_columns(variant: str) -> list:
    n_act = len(action_bounds(variant)[0])
    return (
        ["time", "episode", "done"]
        + [f"base_{a}" for a in "xyz"] + [f"quat_{a}" for a in "wxyz"]
        + [f"v_b_{a}" for a in "xyz"] + [f"w_b_{a}" for a in "xyz"]
        + [f"q_{leg}_{j}" for leg in LEGS for j in ("yaw", "pitch", "knee")]
        + [f"contact_{leg}" for leg in LEGS]
        + [f"r_{t}" for t in REWARD_TERMS] + ["reward"]
        + [f"action_{i}" for i in range(n_act)]
    )


def export_trajectory(policy, env_cfg: EnvConfig, seconds: float) -> np.ndarray:
    """Deterministic single-env rollout, one row per policy step (see ``trajectory_columns``).

    The state columns describe the robot after the step; episodes that end
    early are reset and counted in the ``episode`` column.
    """
    cfg = dataclasses.replace(env_cfg, n_envs=1)
    env = HexapodEnv(cfg)
    n_steps = int(round(seconds / cfg.policy_dt))
    rows = []
    obs = env.observe()
    episode = 0
    for k in range(n_steps):
        action = np.asarray(policy(obs), dtype=float)
        obs, reward, done, info = env.step(action)
        st = env.state
        rows.append(np.concatenate([
            [(k + 1) * cfg.policy_dt, episode, float(done[0])],
            st.pos[0], st.quat[0], st.base_lin_vel[0], st.base_ang_vel[0], st.q[0],
            st.foot_contact[0].astype(float),
            [info["terms"][t][0] for t in REWARD_TERMS], [reward[0]],
            np.clip(action[0], -1.0, 1.0),
        ]))
        episode += int(done[0])
    return np.array(rows)


def cmd_export(cfg: RunConfig, checkpoint=None, seconds: float = 20.0) -> int:
    if checkpoint is None:
        policy, run_cfg = neutral_policy(cfg.env.variant), cfg
    else:
        policy, run_cfg = _policy_from_checkpoint(checkpoint, cfg)
    out = _out_dir(run_cfg)
    save_config(run_cfg, out / "config.yaml")
    env_cfg = dataclasses.replace(run_cfg.env, seed=run_cfg.seed)
    data = export_trajectory(policy, env_cfg, seconds)
    cols = trajectory_columns(run_cfg.env.variant)
    np.savetxt(out / "trajectory.csv", data, delimiter=",", header=",".join(cols), comments="", fmt="%.9g")
    log.info("wrote %d rows x %d columns to %s", *data.shape, out / "trajectory.csv")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hexcpg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, terrain_choices=TRAIN_TERRAINS):
        p.add_argument("--config", type=Path, help="YAML run config; defaults are used for missing keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--reward", choices=REWARDS)
        p.add_argument("--terrain", choices=terrain_choices)
        p.add_argument("--out", help="output directory")
        return p

    p = common(sub.add_parser("train", help="train a policy with PPO"))
    p.add_argument("--updates", type=int, help="number of policy updates")

    p = common(sub.add_parser("eval", help="difficulty sweep: success rate and tracking error per level"))
    p.add_argument("--checkpoint", type=Path, help="policy file; omitted: constant mid-range action")
    p.add_argument("--episodes", type=int, help="episodes per difficulty level")
    p.add_argument("--levels", type=int, help="number of difficulty levels from 0 to 1")

    p = common(sub.add_parser("gait-check", help="open-loop CPG gait report"))
    p.add_argument("--seconds", type=float, default=10.0)

    p = common(sub.add_parser("export", help="dump a deterministic rollout as CSV"))
    p.add_argument("--checkpoint", type=Path, help="policy file; omitted: constant mid-range action")
    p.add_argument("--seconds", type=float, default=20.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, [args.terrain] if args.terrain else None)
        if args.command == "gait-check":
            return cmd_gait_check(cfg, args.seconds)
        return cmd_export(cfg, args.checkpoint, args.seconds)
    except (ConfigError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except Exception as e:  # anything else is a runtime failure
        log.exception("run failed: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
