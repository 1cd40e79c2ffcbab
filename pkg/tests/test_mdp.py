import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hexcpg import mdp
from hexcpg.kinematics import LegGeometry
from hexcpg.mdp import EnvConfig, HexapodEnv, RewardConfig, Transition
from hexcpg.rotations import quat_from_axis_angle
from hexcpg.sim import standing_state

DT = 0.005
# per-term weights before the dt factor, in REWARD_TERMS order
WEIGHTS = [4.0, 1.0, -1.0, -0.05, -0.5, -0.001, -2.5e-7, -0.01, -1e-4, -1.0, 1.0]


def test_obs_dims():
    assert mdp.obs_dim("cpg_rl") == 56 == 3 + 3 + 18 + 18 + 3 + 8 + 3
    assert mdp.obs_dim("rl_baseline") == 66
    with pytest.raises(ValueError):
        mdp.obs_dim("open_loop")


def _obs(quat=None, n_act=8):
    st_ = standing_state(1, LegGeometry(), 0.25)
    if quat is not None:
        st_.quat[0] = quat
    q_nom = st_.q.copy()
    return mdp.observe(st_, np.zeros((1, n_act)), [[0.9, 0.0, 0.05]], q_nom)[0]


def test_obs_gravity_identity():
    o = _obs()
    assert o.shape == (56,)
    np.testing.assert_array_equal(o[42:45], [0.0, 0.0, -1.0])
    np.testing.assert_array_equal(o[-3:], [0.9, 0.0, 0.05])
    np.testing.assert_array_equal(o[6:24], 0.0)


def test_obs_gravity_nose_down():
    # positive pitch about +y tips the +x nose toward -z; gravity then points along +x in the body
    o = _obs(quat_from_axis_angle([0, 1, 0], np.pi / 2))
    np.testing.assert_allclose(o[42:45], [1.0, 0.0, 0.0], atol=1e-12)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0, 3.1))
def test_obs_gravity_unit_norm(axis, angle):
    if np.linalg.norm(axis) < 1e-3:
        return
    o = _obs(quat_from_axis_angle(axis, angle))
    assert abs(np.linalg.norm(o[42:45]) - 1.0) < 1e-12


def test_obs_velocity_in_body_frame():
    st_ = standing_state(1, LegGeometry(), 0.25, yaw=[np.pi / 2])
    st_.lin_vel[0] = [0.0, 1.0, 0.0]
    st_.ang_vel[0] = [0.0, 0.0, 2.0]
    o = mdp.observe(st_, np.zeros((1, 8)), np.zeros((1, 3)), st_.q.copy())[0]
    np.testing.assert_allclose(o[:3], [mdp.OBS_SCALES["lin_vel"], 0, 0], atol=1e-12)
    np.testing.assert_allclose(o[3:6], [0, 0, 2 * mdp.OBS_SCALES["ang_vel"]], atol=1e-12)


def test_decode_lower_bound():
    k1, d, phi = mdp.split_cpg_action(mdp.decode_action(-np.ones(8)))
    np.testing.assert_array_equal(k1, 0.0)
    assert d == 0.0 and phi == -0.6


def test_decode_upper_bound():
    k1, d, phi = mdp.split_cpg_action(mdp.decode_action(np.ones(8)))
    np.testing.assert_allclose(k1, 0.12)
    assert d == pytest.approx(0.15) and phi == pytest.approx(0.6)


def test_decode_midpoint():
    k1, d, phi = mdp.split_cpg_action(mdp.decode_action(np.zeros(8)))
    np.testing.assert_allclose(k1, 0.06)
    assert d == pytest.approx(0.075) and phi == pytest.approx(0.0)


def test_decode_million_raws(rng):
    raw = rng.normal(0, 5, (10**6 // 8 + 1, 8))
    dec = mdp.decode_action(raw)
    assert dec[:, :6].max() <= 0.12 and dec[:, :6].min() >= 0.0
    assert np.all((dec[:, 6] >= 0) & (dec[:, 6] <= 0.15))
    assert np.all(np.abs(dec[:, 7]) <= 0.6)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_decode_monotone(a, b):
    lo, hi = sorted((a, b))
    assert mdp.decode_action(np.full(8, lo))[7] <= mdp.decode_action(np.full(8, hi))[7]


def test_baseline_bounds():
    lo, hi = mdp.action_bounds("rl_baseline")
    assert lo.shape == hi.shape == (18,)
    assert np.all(lo < hi)


def test_tracking_kernel_values():
    assert mdp.tracking_kernel([0.0, 0.0]) == 1.0
    assert mdp.tracking_kernel([0.3, 0.4]) == pytest.approx(math.exp(-1))
    assert mdp.tracking_kernel([0.5]) == pytest.approx(0.36787944117, abs=1e-10)


@given(st.floats(0, 5), st.floats(0, 5))
def test_tracking_kernel_decreasing(a, b):
    if a < b:
        assert mdp.tracking_kernel([a]) >= mdp.tracking_kernel([b])


def test_reward_weights_exact():
    assert [mdp.REWARD1_WEIGHTS[t] for t in mdp.REWARD_TERMS] == WEIGHTS
    assert set(RewardConfig("reward2").enabled) == {"lin_vel_tracking", "ang_vel_tracking", "torque", "collision"}


def _crafted(rng, n=20):
    tr = Transition(
        v_body=rng.normal(0.9, 0.3, (n, 3)), w_body=rng.normal(0, 0.3, (n, 3)),
        command=np.column_stack([rng.uniform(0.8, 1.0, n), np.zeros(n), rng.uniform(-0.1, 0.1, n)]),
        q=rng.normal(0, 0.2, (n, 18)), qd=rng.normal(0, 2, (n, 18)), qd_prev=rng.normal(0, 2, (n, 18)),
        action=rng.uniform(-1, 1, (n, 8)), last_action=rng.uniform(-1, 1, (n, 8)),
        torque=rng.normal(0, 3, (n, 18)), collisions=rng.random((n, 7)) < 0.2,
        touchdown_air=rng.uniform(0, 1, (n, 30)), touchdown=rng.random((n, 30)) < 0.1,
    )
    # the first row: perfect tracking, nothing moving, no events
    z = lambda a: np.zeros_like(a[0])  # noqa: E731
    for name in ("v_body", "w_body", "q", "qd", "qd_prev", "torque", "touchdown_air"):
        getattr(tr, name)[0] = z(getattr(tr, name))
    tr.v_body[0, :2] = tr.command[0, :2]
    tr.w_body[0, 2] = tr.command[0, 2]
    tr.action[0] = tr.last_action[0]
    tr.collisions[0] = False
    tr.touchdown[0] = False
    return tr


def _hand_terms(tr, i):
    """Written out one transition at a time with plain python arithmetic."""
    vx, vy, vz = tr.v_body[i]
    wx, wy, wz = tr.w_body[i]
    cx, cy, cz = tr.command[i]
    q, qd, qdp = tr.q[i], tr.qd[i], tr.qd_prev[i]
    vals = [
        math.exp(-((cx - vx) ** 2 + (cy - vy) ** 2) / 0.25),
        math.exp(-((cz - wz) ** 2) / 0.25),
        vz * vz,
        wx * wx + wy * wy,
        sum(q[3 * leg] ** 2 for leg in range(6)),
        sum(v * v for v in qd),
        sum(((a - b) / DT) ** 2 for a, b in zip(qd, qdp)),
        sum((a - b) ** 2 for a, b in zip(tr.action[i], tr.last_action[i])),
        sum(t * t for t in tr.torque[i]),
        float(sum(bool(c) for c in tr.collisions[i])),
        sum(t - 0.5 for t, hit in zip(tr.touchdown_air[i], tr.touchdown[i]) if hit),
    ]
    return [w * DT * v for w, v in zip(WEIGHTS, vals)]


def test_reward1_twenty_crafted(rng):
    tr = _crafted(rng)
    total, parts = mdp.compute_reward(tr, RewardConfig("reward1", dt=DT))
    for i in range(20):
        hand = _hand_terms(tr, i)
        for name, h in zip(mdp.REWARD_TERMS, hand):
            assert parts[name][i] == pytest.approx(h, rel=1e-12, abs=1e-15), (i, name)
        assert total[i] == pytest.approx(sum(hand), rel=1e-12, abs=1e-15)


def test_reward_perfect_tracking_row(rng):
    total, _ = mdp.compute_reward(_crafted(rng), RewardConfig("reward1", dt=DT))
    assert total[0] == pytest.approx(5 * DT, abs=1e-15)


def test_reward2_is_reward1_minus_disabled(rng):
    tr = _crafted(rng)
    t1, p1 = mdp.compute_reward(tr, RewardConfig("reward1", dt=DT))
    t2, p2 = mdp.compute_reward(tr, RewardConfig("reward2", dt=DT))
    dropped = sum(p1[k] for k in mdp.REWARD_TERMS if k not in mdp.REWARD2_TERMS)
    np.testing.assert_allclose(t2, t1 - dropped, rtol=1e-12, atol=1e-14)
    for i in range(20):
        hand = dict(zip(mdp.REWARD_TERMS, _hand_terms(tr, i)))
        expect = hand["lin_vel_tracking"] + hand["ang_vel_tracking"] + hand["torque"] + hand["collision"]
        assert t2[i] == pytest.approx(expect, rel=1e-12)
        assert all(p2[k][i] == 0 for k in mdp.REWARD_TERMS if k not in mdp.REWARD2_TERMS)


def test_total_is_sum_of_breakdown(rng):
    total, parts = mdp.compute_reward(_crafted(rng), RewardConfig(dt=DT))
    np.testing.assert_allclose(total, sum(parts.values()), rtol=0, atol=1e-15)


def test_hip_joint_scope(rng):
    tr = _crafted(rng)
    _, parts = mdp.compute_reward(tr, RewardConfig(dt=DT, joint_scope="hip"))
    np.testing.assert_allclose(parts["joint_velocity"], -0.001 * DT * np.sum(tr.qd[:, ::3] ** 2, 1))


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig("reward3")
    with pytest.raises(ValueError):
        RewardConfig(weights={"speed": 1.0})


def test_sample_command_ranges(rng):
    cmds = np.array([mdp.sample_command(rng) for _ in range(10**4)])
    assert np.all(cmds[:, 1] == 0.0)
    assert cmds[:, 0].min() >= 0.8 and cmds[:, 0].max() <= 1.0
    assert cmds[:, 2].min() >= -0.1 and cmds[:, 2].max() <= 0.1
    assert cmds[:, 0].std() > 0.05


def _env(**kw):
    kw = {"n_envs": 2, "seed": 0, **kw}
    return HexapodEnv(EnvConfig(**kw))


def test_episode_step_count():
    cfg = EnvConfig()
    assert cfg.policy_dt == pytest.approx(0.005)
    assert cfg.max_episode_steps == 4000


def test_timeout_at_4000_steps():
    env = _env()
    zero = np.zeros((2, 8))
    gamma, ret, disc = 0.99, np.zeros(2), np.zeros(2)
    for t in range(4000):
        obs, r, done, info = env.step(zero)
        ret += r
        disc += gamma**t * r
        if t < 3999:
            assert not done.any(), t
    assert done.all() and info["success"].all() and info["time_out"].all()
    ep = info["episodes"]
    assert np.all(ep.lengths == 4000)
    np.testing.assert_allclose(ep.returns, ret, rtol=1e-12)
    assert np.all(disc < ret)
    # a fresh episode starts after the reset
    assert np.all(env.episode_step == 0)
    assert obs.shape == (2, 56)


def test_collision_ends_episode_unsuccessfully():
    env = _env()
    env.state.pos[1, 2] = 0.01
    _, _, done, info = env.step(np.zeros((2, 8)))
    assert done[1] and not info["success"][1] and info["failed"][1]
    assert not done[0]
    assert info["terms"]["collision"][1] < 0
    assert "terminal_obs" in info


def test_divergence_is_failed_termination():
    env = _env()
    env.state.lin_vel[0, 0] = 1e4
    obs, r, done, info = env.step(np.zeros((2, 8)))
    assert done[0] and info["failed"][0] and not info["success"][0]
    assert r[0] == 0.0 and np.all(np.isfinite(obs))


def test_env_is_deterministic():
    a, b = _env(seed=5, terrain="uniform", terrain_size=8.0), _env(seed=5, terrain="uniform", terrain_size=8.0)
    acts = np.random.default_rng(0).uniform(-1, 1, (50, 2, 8))
    for act in acts:
        oa, ra, _, _ = a.step(act)
        ob, rb, _, _ = b.step(act)
        assert oa.tobytes() == ob.tobytes() and ra.tobytes() == rb.tobytes()


def test_reset_obs_invariants():
    env = _env(n_envs=8)
    obs = env.reset()
    assert obs.shape == (8, 56)
    np.testing.assert_allclose(np.linalg.norm(obs[:, 42:45], axis=1), 1.0)
    assert np.all((obs[:, -3] >= 0.8) & (obs[:, -3] <= 1.0))


def test_baseline_env_shapes():
    env = _env(variant="rl_baseline")
    obs, r, done, _ = env.step(np.zeros((2, 18)))
    assert obs.shape == (2, 66) and r.shape == (2,)


def test_neutral_gait_makes_progress():
    env = _env()
    p0 = env.state.pos[:, :2].copy()
    heading = env.state.rotation[:, :2, 0]
    for _ in range(400):
        env.step(np.zeros((2, 8)))
    assert np.all(np.sum((env.state.pos[:, :2] - p0) * heading, 1) > 0.2)


def test_curriculum_levels_move():
    env = HexapodEnv(dataclasses.replace(EnvConfig(), terrain="curriculum", n_envs=3))
    env.levels[:] = [0, 4, 9]
    env.episode_step[:] = 100
    env.episode_start_xy[:] = env.state.pos[:, :2]
    env.state.pos[0, 0] += 3.0
    env._update_curriculum(np.arange(3))
    assert env.levels[0] == 1
    assert env.levels[1] == 3 and env.levels[2] == 8
