import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hexcpg import ppo
from hexcpg.mdp import EnvConfig, HexapodEnv
from hexcpg.ppo import ActorCritic, PpoConfig


def brute_gae(r, v, d, v_last, gamma, lam):
    """Advantages from the lambda-weighted mixture of n-step TD returns."""
    T = len(r)
    vals = list(v) + [v_last]
    adv = []
    for t in range(T):
        # n-step returns from t, truncated at the episode end or the horizon
        Gs, acc, disc = [], 0.0, 1.0
        for k in range(t, T):
            acc += disc * r[k]
            disc *= gamma
            if d[k]:
                Gs.append(acc)
                break
            Gs.append(acc + disc * vals[k + 1])
        # the last n-step return absorbs the remaining lambda mass
        n = len(Gs)
        weights = [(1 - lam) * lam**i for i in range(n - 1)] + [lam ** (n - 1)]
        adv.append(sum(w * g for w, g in zip(weights, Gs)) - v[t])
    return np.array(adv)


def test_gae_horizon_one():
    adv, ret = ppo.compute_gae(torch.tensor([[1.0]], dtype=torch.float64), torch.tensor([[0.5]], dtype=torch.float64),
                               torch.tensor([[0.0]]), torch.tensor([2.0], dtype=torch.float64), 0.9, 0.95)
    assert adv.item() == pytest.approx(1.0 + 0.9 * 2.0 - 0.5, abs=1e-15)
    assert ret.item() == pytest.approx(1.0 + 0.9 * 2.0, abs=1e-15)


def test_gae_lambda_one_is_discounted_return(rng):
    r, v = rng.normal(size=5), rng.normal(size=5)
    last, g = 0.7, 0.97
    adv, _ = ppo.compute_gae(torch.tensor(r)[:, None], torch.tensor(v)[:, None], torch.zeros(5, 1),
                             torch.tensor([last], dtype=torch.float64), g, 1.0)
    for t in range(5):
        ret = sum(g ** (k - t) * r[k] for k in range(t, 5)) + g ** (5 - t) * last
        assert adv[t, 0].item() == pytest.approx(ret - v[t], abs=1e-12)


def test_gae_done_masks_bootstrap():
    r = torch.tensor([[1.0], [1.0]], dtype=torch.float64)
    v = torch.tensor([[0.0], [100.0]], dtype=torch.float64)
    adv, _ = ppo.compute_gae(r, v, torch.tensor([[1.0], [0.0]]), torch.tensor([0.0], dtype=torch.float64), 0.99, 0.95)
    assert adv[0, 0].item() == 1.0


def test_gae_exhaustive_short_sequences(rng):
    for T in range(1, 7):
        for dones in itertools.product([0, 1], repeat=T):
            for gamma, lam in ((0.99, 0.95), (0.9, 0.0), (1.0, 1.0), (0.8, 0.5)):
                r, v, last = rng.normal(size=T), rng.normal(size=T), rng.normal()
                adv, ret = ppo.compute_gae(torch.tensor(r)[:, None], torch.tensor(v)[:, None],
                                           torch.tensor(dones, dtype=torch.float64)[:, None],
                                           torch.tensor([last], dtype=torch.float64), gamma, lam)
                want = brute_gae(r, v, dones, last, gamma, lam)
                np.testing.assert_allclose(adv[:, 0].numpy(), want, rtol=0, atol=1e-10)
                np.testing.assert_allclose(ret[:, 0].numpy(), want + v, rtol=0, atol=1e-10)


def test_gae_columns_independent(rng):
    r, v = torch.tensor(rng.normal(size=(6, 3))), torch.tensor(rng.normal(size=(6, 3)))
    d = torch.tensor(rng.random((6, 3)) < 0.3, dtype=torch.float64)
    last = torch.tensor(rng.normal(size=3))
    adv, _ = ppo.compute_gae(r, v, d, last, 0.99, 0.95)
    for j in range(3):
        one, _ = ppo.compute_gae(r[:, j:j + 1], v[:, j:j + 1], d[:, j:j + 1], last[j:j + 1], 0.99, 0.95)
        torch.testing.assert_close(adv[:, j], one[:, 0], rtol=0, atol=0)


def test_surrogate_ratio_one():
    adv = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    lp = torch.tensor([-1.0, -0.3, -2.0, 0.1], dtype=torch.float64)
    obj, frac = ppo.clipped_surrogate(lp, lp.clone(), adv, 0.2)
    assert obj.item() == adv.mean().item() and frac.item() == 0.0


def test_surrogate_ratio_one_point_five():
    old = torch.zeros(2, dtype=torch.float64)
    lp = torch.full((2,), np.log(1.5), dtype=torch.float64)
    obj, frac = ppo.clipped_surrogate(lp, old, torch.tensor([2.0, 2.0], dtype=torch.float64), 0.2)
    assert obj.item() == pytest.approx(1.2 * 2.0, abs=1e-15) and frac.item() == 1.0
    # negative advantage keeps the unclipped, more pessimistic term
    obj, _ = ppo.clipped_surrogate(lp, old, torch.tensor([-2.0, -2.0], dtype=torch.float64), 0.2)
    assert obj.item() == pytest.approx(-3.0, abs=1e-14)


def test_value_loss_clipping():
    v, old, ret = torch.tensor([1.0]), torch.tensor([0.0]), torch.tensor([1.0])
    assert ppo.clipped_value_loss(v, old, ret, 0.2).item() == pytest.approx(0.64)


def test_gaussian_kl_against_torch(rng):
    mu0, mu1 = torch.tensor(rng.normal(size=(5, 3))), torch.tensor(rng.normal(size=(5, 3)))
    s0, s1 = torch.tensor(rng.uniform(0.2, 2, (5, 3))), torch.tensor(rng.uniform(0.2, 2, (5, 3)))
    want = torch.distributions.kl_divergence(torch.distributions.Normal(mu0, s0), torch.distributions.Normal(mu1, s1)).sum(-1)
    torch.testing.assert_close(ppo.gaussian_kl(mu0, s0, mu1, s1), want)
    assert torch.all(ppo.gaussian_kl(mu0, s0, mu0, s0) == 0)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_advantage_normalization(xs):
    x = torch.tensor(xs, dtype=torch.float64)
    if x.std() < 1e-3:
        return
    y = ppo.normalize_advantages(x)
    assert abs(y.mean().item()) < 1e-6
    assert abs(y.std().item() - 1.0) < 1e-3


def test_lr_decreases_under_high_kl():
    cfg = PpoConfig()
    lr, trace = cfg.lr, []
    for _ in range(5):
        new = ppo.adapt_lr(lr, 0.03, cfg)
        assert new < lr
        lr = new
        trace.append(lr)
    assert trace[0] == pytest.approx(1e-3 / 1.5)
    assert ppo.adapt_lr(1e-3, 0.004, cfg) == pytest.approx(1.5e-3)
    assert ppo.adapt_lr(1e-3, 0.01, cfg) == 1e-3
    assert ppo.adapt_lr(cfg.lr_min, 1.0, cfg) == cfg.lr_min
    assert ppo.adapt_lr(cfg.lr_max, 0.0, cfg) == cfg.lr_max


def test_batch_arithmetic():
    desk = PpoConfig()
    assert desk.batch_size == 1536 and desk.n_minibatches == 4
    full = PpoConfig(n_envs=4096, rollout_horizon=24, minibatch_size=4096 * 6, hidden=(512, 256, 128))
    assert full.batch_size == 98304 and full.minibatch_size == 24576 and full.n_minibatches == 4


@pytest.mark.parametrize("kw", [dict(minibatch_size=500), dict(n_epochs=0), dict(gamma=1.5),
                                dict(lr=1.0), dict(hidden=()), dict(clip=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PpoConfig(**kw)


def test_network_shapes():
    net = ActorCritic(56, 8)
    mean, std, value = net(torch.zeros(7, 56))
    assert mean.shape == (7, 8) and std.shape == (7, 8) and value.shape == (7,)
    assert torch.allclose(std, torch.exp(torch.tensor(-1.0)))
    assert sum(p.numel() for p in net.log_std.unsqueeze(0)) == 8


def test_zero_final_layer_gives_zero_mean(rng):
    net = ActorCritic(56, 8)
    with torch.no_grad():
        net.actor[-1].weight.zero_()
    mean, _, _ = net(torch.tensor(rng.normal(0, 10, (50, 56)), dtype=torch.float32))
    assert torch.all(mean == 0)


def test_initial_mean_near_midrange(rng):
    net = ActorCritic(56, 8)
    mean, _, _ = net(torch.tensor(rng.normal(size=(50, 56)), dtype=torch.float32))
    assert mean.abs().max() < 0.05
    assert torch.all(net.actor[-1].bias == 0)


def test_act_log_probs_consistent():
    net = ActorCritic(10, 3)
    obs = torch.randn(20, 10)
    a, logp, v, mu, sigma = net.act(obs, generator=torch.Generator().manual_seed(0))
    want = torch.distributions.Normal(mu, sigma).log_prob(a).sum(-1)
    torch.testing.assert_close(logp, want)
    ad, *_ = net.act(obs, deterministic=True)
    torch.testing.assert_close(ad, mu)


def _tiny_minibatch(net, n, gen):
    obs = torch.randn(n, 4, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        mean, std, value = net(obs)
        actions = mean + std * torch.randn(mean.shape, generator=gen, dtype=torch.float64)
        lp = torch.distributions.Normal(mean, std).log_prob(actions).sum(-1)
    # keep ratios and value moves strictly inside the clip range so the loss is smooth
    return {
        "obs": obs, "actions": actions,
        "log_probs": lp + 0.1 * (torch.rand(n, generator=gen, dtype=torch.float64) - 0.5),
        "values": value + 0.1 * (torch.rand(n, generator=gen, dtype=torch.float64) - 0.5),
        "returns": torch.randn(n, generator=gen, dtype=torch.float64),
        "advantages": torch.randn(n, generator=gen, dtype=torch.float64),
    }


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(1)
    net = ActorCritic(4, 2, hidden=(2,), init_log_std=-0.5).double()
    mb = _tiny_minibatch(net, 16, gen)
    cfg = PpoConfig()
    loss, _ = ppo.ppo_loss(net, mb, cfg)
    net.zero_grad()
    loss.backward()
    eps = 1e-6
    for name, p in net.named_parameters():
        grad = p.grad.clone()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = ppo.ppo_loss(net, mb, cfg)[0].item()
            flat[i] = orig - eps
            down = ppo.ppo_loss(net, mb, cfg)[0].item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            g = grad.view(-1)[i].item()
            assert abs(fd - g) <= 1e-5 * max(abs(g), abs(fd), 1e-3), (name, i, g, fd)


def _fake_batch(net, cfg, gen, reward_fill=None):
    T, N = cfg.rollout_horizon, cfg.n_envs
    obs = torch.randn(T, N, net.obs_dim, generator=gen)
    a, lp, v, mu, sig = net.act(obs.reshape(T * N, -1), generator=gen)
    r = torch.randn(T, N, generator=gen)
    if reward_fill is not None:
        r[0, 0] = reward_fill
    return ppo.RolloutBatch(obs, a.reshape(T, N, -1), lp.reshape(T, N), v.reshape(T, N), r,
                            torch.zeros(T, N), mu.reshape(T, N, -1), sig.reshape(T, N, -1), torch.zeros(N))


def test_non_finite_loss_rolls_back():
    cfg = PpoConfig(n_envs=4, rollout_horizon=8, minibatch_size=8)
    gen = torch.Generator().manual_seed(0)
    net = ActorCritic(6, 2)
    opt = ppo.make_optimizer(net, cfg)
    ppo.ppo_update(net, opt, _fake_batch(net, cfg, gen), cfg, gen)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    opt_before = ppo._clone_opt_state(opt.state_dict())
    with pytest.raises(ppo.NonFiniteLoss):
        ppo.ppo_update(net, opt, _fake_batch(net, cfg, gen, reward_fill=float("nan")), cfg, gen)
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])
    after = opt.state_dict()
    for pid, s in opt_before["state"].items():
        assert torch.equal(after["state"][pid]["exp_avg"], s["exp_avg"])
    assert after["param_groups"][0]["lr"] == opt_before["param_groups"][0]["lr"]


def test_update_keeps_parameters_finite_and_reports():
    cfg = PpoConfig(n_envs=4, rollout_horizon=8, minibatch_size=16)
    gen = torch.Generator().manual_seed(0)
    net = ActorCritic(6, 2)
    opt = ppo.make_optimizer(net, cfg)
    _, stats = ppo.ppo_update(net, opt, _fake_batch(net, cfg, gen), cfg, gen)
    assert set(stats) == {"surrogate", "value_loss", "entropy", "clip_frac", "kl", "lr"}
    assert all(torch.isfinite(p).all() for p in net.parameters())
    with pytest.raises(ValueError):
        ppo.ppo_update(net, opt, _fake_batch(net, PpoConfig(n_envs=2, rollout_horizon=8, minibatch_size=16), gen), cfg, gen)


def test_rollout_shapes_desk_scale():
    cfg = PpoConfig()
    env = HexapodEnv(EnvConfig(n_envs=cfg.n_envs))
    net = ActorCritic(env.num_obs, env.num_actions)
    batch, next_obs, stats = ppo.collect_rollout(env, net, cfg.rollout_horizon, env.observe(),
                                                 torch.Generator().manual_seed(0))
    assert batch.obs.shape == (24, 64, 56) and batch.actions.shape == (24, 64, 8)
    assert batch.horizon * batch.n_envs == cfg.batch_size == 1536
    assert batch.last_values.shape == (64,) and next_obs.shape == (64, 56)
    lp = torch.distributions.Normal(batch.mu, batch.sigma).log_prob(batch.actions).sum(-1)
    torch.testing.assert_close(lp, batch.log_probs)
    assert np.isfinite(stats.mean_reward)


def test_training_is_deterministic(tmp_path):
    cfg = PpoConfig(n_envs=4, rollout_horizon=8, minibatch_size=16, n_updates=3)
    env_cfg = EnvConfig(n_envs=4)
    a = ppo.train(env_cfg, cfg, seed=3)
    b = ppo.train(env_cfg, cfg, seed=3)
    for (ka, va), (kb, vb) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert [r["mean_reward"] for r in a.history] == [r["mean_reward"] for r in b.history]
    c = ppo.train(env_cfg, cfg, seed=4)
    assert not torch.equal(a.net.actor[0].weight, c.net.actor[0].weight)


def test_train_writes_outputs(tmp_path):
    cfg = PpoConfig(n_envs=4, rollout_horizon=8, minibatch_size=16, checkpoint_every=2)
    res = ppo.train(EnvConfig(), cfg, seed=0, out_dir=tmp_path, meta={"variant": "cpg_rl"}, n_updates=4)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == ppo.METRIC_COLUMNS and len(lines) == 5
    assert [p.name for p in res.checkpoints] == [
        "checkpoint_00002.safetensors", "checkpoint_00004.safetensors", "policy.safetensors"]
    _, meta = ppo.load_checkpoint(tmp_path / "policy.safetensors")
    assert meta == {"variant": "cpg_rl", "update": 4}


def test_checkpoint_round_trip(tmp_path):
    net = ActorCritic(56, 8, hidden=(16, 8))
    ppo.save_checkpoint(tmp_path / "p.safetensors", net, {"seed": 7})
    back, meta = ppo.load_checkpoint(tmp_path / "p.safetensors")
    assert meta == {"seed": 7} and back.hidden == (16, 8)
    for k, v in net.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    net = ActorCritic(4, 2, hidden=(3,))
    monkeypatch.setattr(ppo, "CHECKPOINT_VERSION", 2)
    ppo.save_checkpoint(tmp_path / "new.safetensors", net)
    monkeypatch.setattr(ppo, "CHECKPOINT_VERSION", 1)
    with pytest.raises(ppo.CheckpointError, match="version"):
        ppo.load_checkpoint(tmp_path / "new.safetensors")


def test_checkpoint_foreign_files(tmp_path):
    from safetensors.torch import save_file
    save_file({"w": torch.zeros(2)}, str(tmp_path / "other.safetensors"), metadata={"format": "something"})
    with pytest.raises(ppo.CheckpointError):
        ppo.load_checkpoint(tmp_path / "other.safetensors")
    (tmp_path / "junk.safetensors").write_bytes(b"not a tensor file")
    with pytest.raises(ppo.CheckpointError):
        ppo.load_checkpoint(tmp_path / "junk.safetensors")
    with pytest.raises(ppo.CheckpointError):
        ppo.load_checkpoint(tmp_path / "missing.safetensors")


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        ppo.evaluate_success(lambda o: np.zeros((len(o), 8)), EnvConfig(), 0)


def test_falling_policy_scores_zero():
    # every foot pulled up to the body: the base drops onto the ground
    cfg = EnvConfig(variant="rl_baseline", episode_length_s=2.0)
    res = ppo.evaluate_success(lambda o: np.tile([0.0, 0.0, 1.0], (len(o), 6)), cfg, 4)
    assert res.success_rate == 0.0 and res.n_episodes == 4


def test_sweep_rows():
    cfg = EnvConfig(episode_length_s=0.5, terrain_size=8.0)
    rows = ppo.sweep_difficulty(lambda o: np.zeros((len(o), 8)), cfg, "slope", levels=3, n_episodes=2)
    assert [r["difficulty"] for r in rows] == [0.0, 0.5, 1.0]
    assert rows[-1]["parameter"] == pytest.approx(15.0)
    assert all(r["n_episodes"] == 2 for r in rows)
