import math

import numpy as np
import pandas as pd
import pytest

import policy_net
from alip_core import AlipParams
from errors import InvalidParams, NonFiniteLoss
from footstep_mpc import MpcConfig
from gait_env import ACT_DIM, OBS_DIM, Action, EnvConfig, GaitEnv
from policy_net import MlpPolicy, ValueNet, gaussian_log_prob
from ppo_trainer import (
    METRIC_COLUMNS,
    PpoConfig,
    RmsProp,
    RolloutBuffer,
    _clip_global_norm,
    collect_rollouts,
    compute_gae,
    evaluate_policy,
    ppo_update,
    surrogate_gradient,
    train,
)
from utils import read_csv

PARAMS = AlipParams()
LOW_RATE = EnvConfig(f_plan=4.0, max_steps=10)


def make_buffer(rewards, values, dones, last_values):
    rewards = np.asarray(rewards, dtype=float)
    return RolloutBuffer(obs=np.zeros(rewards.shape + (OBS_DIM,)), actions=np.zeros(rewards.shape + (ACT_DIM,)),
                         log_probs=np.zeros(rewards.shape), rewards=rewards, values=np.asarray(values, float),
                         dones=np.asarray(dones, float), last_values=np.asarray(last_values, float))


def gae_oracle(r, v, d, v_last, gamma, lam):
    T = len(r)
    v_ext = np.append(v, v_last)
    delta = [r[t] + gamma * v_ext[t + 1] * (1 - d[t]) - v[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, discount = 0.0, 1.0
        for k in range(t, T):
            total += discount * delta[k]
            if d[k]:
                break
            discount *= gamma * lam
        adv[t] = total
    return adv


def low_rate_envs(n):
    return [GaitEnv(PARAMS, env_cfg=LOW_RATE) for _ in range(n)]


# ------------------------------------------------------------------ GAE

def test_gae_lambda_zero_is_td_error():
    r, v, d = [1.0, 0.5, -0.2], [0.3, 0.1, 0.7], [0.0, 0.0, 0.0]
    buf = compute_gae(make_buffer(r, v, d, 0.4), 0.9, 0.0)
    expected = [1.0 + 0.9 * 0.1 - 0.3, 0.5 + 0.9 * 0.7 - 0.1, -0.2 + 0.9 * 0.4 - 0.7]
    np.testing.assert_allclose(buf.advantages, expected, rtol=0, atol=1e-14)
    np.testing.assert_allclose(buf.returns, buf.advantages + np.array(v), rtol=0, atol=1e-14)


def test_gae_lambda_one_zero_values_is_discounted_return():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    d = np.array([0.0, 1.0, 0.0, 0.0])
    buf = compute_gae(make_buffer(r, np.zeros(4), d, 0.0), 0.5, 1.0)
    np.testing.assert_allclose(buf.advantages, [1.0 + 0.5 * 2.0, 2.0, 3.0 + 0.5 * 4.0, 4.0], rtol=0, atol=1e-14)


def test_gae_matches_brute_force(rng):
    for _ in range(20):
        T = int(rng.integers(1, 30))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.2).astype(float)
        v_last = float(rng.normal())
        buf = compute_gae(make_buffer(r, v, d, v_last), 0.99, 0.95)
        np.testing.assert_allclose(buf.advantages, gae_oracle(r, v, d, v_last, 0.99, 0.95), rtol=1e-12, atol=1e-12)


def test_gae_per_env_columns(rng):
    r, v = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    d = (rng.random((12, 3)) < 0.25).astype(float)
    v_last = rng.normal(size=3)
    buf = compute_gae(make_buffer(r, v, d, v_last), 0.99, 0.95)
    assert buf.advantages.shape == (12, 3)
    for i in range(3):
        np.testing.assert_allclose(buf.advantages[:, i], gae_oracle(r[:, i], v[:, i], d[:, i], v_last[i], 0.99, 0.95),
                                   rtol=1e-12, atol=1e-12)


def test_gae_rejects_nan_rewards():
    with pytest.raises(NonFiniteLoss):
        compute_gae(make_buffer([1.0, float("nan")], [0.0, 0.0], [0.0, 0.0], 0.0), 0.99, 0.95)


# ------------------------------------------------------------------ surrogate

def small_policy(seed=0):
    policy = MlpPolicy([2, 2], output_scale=(0.5, 0.5), sigma_frac=0.4, seed=seed)
    rng = np.random.default_rng(seed + 100)
    policy.weights[0][...] = rng.normal(0.0, 0.8, (2, 2))
    policy.biases[0][...] = rng.normal(0.0, 0.3, 2)
    return policy


def test_ratio_one_surrogate_is_mean_advantage(rng):
    policy = small_policy()
    obs, actions = rng.normal(size=(16, 2)), rng.normal(0.0, 0.2, (16, 2))
    adv = rng.normal(size=16)
    logp = gaussian_log_prob(actions, policy.forward(obs), policy.log_std)
    surr, _, stats = surrogate_gradient(policy, obs, actions, logp, adv, 0.2)
    assert surr == pytest.approx(adv.mean(), abs=1e-14)
    assert stats["clip_frac"] == 0.0
    assert stats["approx_kl"] == pytest.approx(0.0, abs=1e-14)


def test_saturated_clip_has_zero_gradient(rng):
    policy = small_policy()
    obs, actions = rng.normal(size=(8, 2)), rng.normal(0.0, 0.2, (8, 2))
    logp = gaussian_log_prob(actions, policy.forward(obs), policy.log_std)
    surr, grads, stats = surrogate_gradient(policy, obs, actions, logp - math.log(2.0), np.ones(8), 0.2)
    assert surr == pytest.approx(1.2)
    assert stats["clip_frac"] == 1.0
    for g in grads:
        assert not np.any(g)


def test_surrogate_gradient_matches_finite_differences(rng):
    policy = small_policy(seed=3)
    obs, actions = rng.normal(size=(10, 2)), rng.normal(0.0, 0.2, (10, 2))
    adv = rng.normal(size=10)
    logp = gaussian_log_prob(actions, policy.forward(obs), policy.log_std)
    logp_old = logp - rng.uniform(-0.08, 0.08, 10)
    # one sample with a positive advantage far past the clip
    adv[0], logp_old[0] = abs(adv[0]) + 0.1, logp[0] - 1.0

    def surrogate():
        return surrogate_gradient(policy, obs, actions, logp_old, adv, 0.2)[0]

    _, grads, _ = surrogate_gradient(policy, obs, actions, logp_old, adv, 0.2)
    h = 1e-6
    for p, g in zip(policy.params(), grads):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = surrogate()
            p[idx] = old - h
            down = surrogate()
            p[idx] = old
            numeric[idx] = (up - down) / (2 * h)
        assert np.linalg.norm(g - numeric) <= 1e-4 * max(np.linalg.norm(numeric), 1e-12)


def test_clip_global_norm():
    clipped = _clip_global_norm([np.array([3.0]), np.array([4.0])], 0.5)
    np.testing.assert_allclose(np.concatenate(clipped), [0.3, 0.4])
    kept = _clip_global_norm([np.array([0.1])], 0.5)
    np.testing.assert_array_equal(kept[0], [0.1])
    with pytest.raises(NonFiniteLoss):
        _clip_global_norm([np.array([np.inf])], 0.5)


def test_rmsprop_descends():
    p = np.array([1.0])
    opt = RmsProp([p], lr=0.01, decay=0.99, eps=1e-8)
    opt.step([np.array([2.0])])
    assert p[0] == pytest.approx(0.9, abs=1e-6)


# ------------------------------------------------------------------ rollouts / update

def test_rollout_shapes():
    buf = collect_rollouts(low_rate_envs(2), MlpPolicy(), ValueNet(), 5, np.random.default_rng(0))
    assert len(buf) == 10
    assert buf.obs.shape == (5, 2, OBS_DIM)
    assert buf.actions.shape == (5, 2, ACT_DIM)
    assert buf.last_values.shape == (2,)
    assert buf.flat("obs").shape == (10, OBS_DIM)
    assert len(buf.Ly_errs) == 10


def test_rollouts_are_seeded():
    a = collect_rollouts(low_rate_envs(2), MlpPolicy(), ValueNet(), 6, np.random.default_rng(9))
    b = collect_rollouts(low_rate_envs(2), MlpPolicy(), ValueNet(), 6, np.random.default_rng(9))
    for name in ("obs", "actions", "log_probs", "rewards", "values", "dones"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_zero_policy_rollout_matches_baseline():
    length = 8
    buf = collect_rollouts(low_rate_envs(1), MlpPolicy(), ValueNet(), length, np.random.default_rng(0),
                           sigma_override=1e-300)
    env = GaitEnv(PARAMS, env_cfg=LOW_RATE)
    env.reset_episode(seed=int(np.random.default_rng(0).integers(2**31 - 1)))
    rewards = []
    for _ in range(length):
        out = env.env_step(Action())
        rewards.append(out.reward)
        if out.terminated or out.truncated:
            env.reset_episode(seed=0)
    np.testing.assert_allclose(buf.rewards[:, 0], rewards, rtol=0, atol=1e-12)
    assert np.max(np.abs(buf.actions)) < 1e-290


def test_ppo_update_moves_policy_off_zero():
    cfg = PpoConfig(n_envs=2, rollout_len=12, epochs=2, minibatch_size=8, hidden=(8, 8))
    policy = MlpPolicy((OBS_DIM, 8, 8, ACT_DIM))
    value = ValueNet((OBS_DIM, 8, 8, 1))
    buf = collect_rollouts(low_rate_envs(2), policy, value, 12, np.random.default_rng(1))
    with pytest.raises(InvalidParams):
        ppo_update(policy, value, buf, cfg, np.random.default_rng(2))
    compute_gae(buf, cfg.gamma, cfg.gae_lambda)
    stats = ppo_update(policy, value, buf, cfg, np.random.default_rng(2))
    assert set(stats) == {"surrogate", "value_loss", "clip_frac", "approx_kl"}
    assert all(math.isfinite(v) for v in stats.values())
    assert np.any(policy.weights[-1])


def test_evaluate_policy_frame():
    env = GaitEnv(PARAMS, env_cfg=LOW_RATE)
    frame = evaluate_policy(env, None, [0, 1], max_env_steps=3)
    assert list(frame.columns) == ["seed", "return", "length", "mean_Ly_err", "mean_Lx_err", "terminated"]
    assert frame["length"].tolist() == [3, 3]
    assert not frame["terminated"].any()
    assert np.all(frame["mean_Ly_err"] >= 0)
    same = evaluate_policy(env, MlpPolicy(), [0, 1], max_env_steps=3)
    pd.testing.assert_frame_equal(frame, same)


# ------------------------------------------------------------------ config / train

@pytest.mark.parametrize("kwargs", [{"clip_eps": 0.0}, {"gamma": 0.0}, {"n_envs": 0}, {"max_env_steps": -1},
                                    {"lr_policy": 0.0}])
def test_ppo_config_validation(kwargs):
    with pytest.raises(InvalidParams):
        PpoConfig(**kwargs)


def test_iteration_count():
    cfg = PpoConfig(n_envs=2, rollout_len=16, max_env_steps=100)
    assert cfg.steps_per_iter == 32
    assert cfg.n_iterations == 4
    assert cfg.sigma_schedule == (0.5, 0.05, 100)


def test_zero_budget_keeps_zero_policy(tmp_path):
    cfg = PpoConfig(n_envs=1, rollout_len=4, max_env_steps=0, hidden=(8, 8))
    result = train(cfg, LOW_RATE, MpcConfig(), None, tmp_path, progress=False)
    assert result.metrics.empty
    frame, _ = read_csv(result.metrics_path)
    assert list(frame.columns) == METRIC_COLUMNS
    assert len(frame) == 0
    policy = policy_net.load(result.policy_path)
    np.testing.assert_array_equal(policy.forward(np.ones(OBS_DIM)), np.zeros(ACT_DIM))


@pytest.mark.slow
def test_training_smoke_resume_and_reproducibility(tmp_path):
    cfg = PpoConfig(n_envs=2, rollout_len=16, epochs=2, minibatch_size=16, max_env_steps=64, hidden=(8, 8))
    first = train(cfg, LOW_RATE, MpcConfig(), None, tmp_path / "a", progress=False, meta={"seed": 0})
    assert first.metrics["iter"].tolist() == [0, 1]
    assert first.metrics["env_steps"].tolist() == [32, 64]
    assert (tmp_path / "a" / "trainer_state.npz").is_file()
    _, meta = read_csv(first.metrics_path)
    assert meta["seed"] == "0"

    again = train(cfg, LOW_RATE, MpcConfig(), None, tmp_path / "b", progress=False, meta={"seed": 0})
    pd.testing.assert_frame_equal(first.metrics, again.metrics)
    assert first.policy_path.read_bytes() == again.policy_path.read_bytes()

    half = PpoConfig(n_envs=2, rollout_len=16, epochs=2, minibatch_size=16, max_env_steps=32, hidden=(8, 8))
    train(half, LOW_RATE, MpcConfig(), None, tmp_path / "c", progress=False)
    resumed = train(cfg, LOW_RATE, MpcConfig(), None, tmp_path / "c", resume=True, progress=False)
    assert resumed.metrics["iter"].tolist() == [0, 1]
    pd.testing.assert_frame_equal(resumed.metrics.iloc[:1], first.metrics.iloc[:1], check_dtype=False)
