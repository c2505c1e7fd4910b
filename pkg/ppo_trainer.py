"""PPO (clipped surrogate, GAE) for the residual policy.

One env step is one planning interval. Each iteration collects n_envs * rollout_len
transitions with the current Gaussian policy, computes GAE advantages, runs a few
epochs of minibatch updates and appends a metrics row.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

import policy_net
from errors import InvalidParams, NonFiniteLoss
from gait_env import ACT_DIM, OBS_DIM, Action, EnvConfig, GaitEnv, GaitSampler, ProxyParams, RewardConfig
from policy_net import MlpPolicy, ObsNormalizer, ValueNet, gaussian_log_prob, sigma_schedule
from utils import validate_range, write_csv

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["iter", "env_steps", "mean_return", "mean_ep_len", "mean_Ly_err", "mean_Lx_err",
                  "clip_frac", "approx_kl", "sigma"]


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    n_envs: int = 4
    rollout_len: int = 1024
    epochs: int = 5
    minibatch_size: int = 512
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    sigma0: float = 0.5
    sigma_final: float = 0.05
    sigma_horizon: int = 0
    max_env_steps: int = 2_000_000
    seed: int = 0
    hidden: tuple = (64, 64)
    max_grad_norm: float = 0.5
    rms_decay: float = 0.99
    rms_eps: float = 1e-8

    def __post_init__(self):
        validate_range("clip_eps", self.clip_eps, 0.0, 1.0)
        if self.clip_eps == 0.0:
            raise InvalidParams("clip_eps must be in (0, 1)")
        for name in ("gamma", "gae_lambda"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                raise InvalidParams(f"{name} must be in (0, 1], got {val!r}")
        for name in ("n_envs", "rollout_len", "epochs", "minibatch_size"):
            if int(getattr(self, name)) < 1:
                raise InvalidParams(f"{name} must be a positive integer")
        if self.max_env_steps < 0 or self.sigma_horizon < 0:
            raise InvalidParams("max_env_steps and sigma_horizon must be >= 0")
        if not (self.lr_policy > 0 and self.lr_value > 0 and self.sigma0 > 0 and self.sigma_final > 0):
            raise InvalidParams("learning rates and sigmas must be > 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def sigma_schedule(self):
        return self.sigma0, self.sigma_final, self.sigma_horizon or self.max_env_steps

    @property
    def steps_per_iter(self):
        return self.n_envs * self.rollout_len

    @property
    def n_iterations(self):
        return math.ceil(self.max_env_steps / self.steps_per_iter)


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    ep_returns: list = field(default_factory=list)
    ep_lengths: list = field(default_factory=list)
    Ly_errs: list = field(default_factory=list)
    Lx_errs: list = field(default_factory=list)

    def __len__(self):
        return self.rewards.size

    def flat(self, name):
        arr = getattr(self, name)
        return arr.reshape(len(self), *arr.shape[2:])


class RmsProp:
    """RMSProp without momentum; updates the parameter arrays in place."""

    def __init__(self, params, lr, decay=0.99, eps=1e-8):
        self.params = params
        self.lr, self.decay, self.eps = lr, decay, eps
        self.sq = [np.zeros_like(p) for p in params]

    def step(self, grads):
        for p, g, s in zip(self.params, grads, self.sq):
            s *= self.decay
            s += (1.0 - self.decay) * g * g
            p -= self.lr * g / (np.sqrt(s) + self.eps)

    def state(self):
        return self.sq

    def load_state(self, arrays):
        for s, a in zip(self.sq, arrays):
            s[...] = a


class EnvPool:
    """Environments plus their current observation and running episode totals."""

    def __init__(self, envs, rng):
        self.envs = list(envs)
        self.obs = np.stack([env.reset_episode(seed=_draw_seed(rng)).as_vector() for env in self.envs])
        self.ep_return = np.zeros(len(self.envs))
        self.ep_len = np.zeros(len(self.envs), dtype=int)


def _draw_seed(rng):
    return int(rng.integers(2**31 - 1))


def collect_rollouts(envs, policy: MlpPolicy, value: ValueNet, length, rng, sigma_override=None) -> RolloutBuffer:
    """Step every env `length` times with sampled residuals; finished episodes restart."""
    pool = envs if isinstance(envs, EnvPool) else EnvPool(envs, rng)
    n = len(pool.envs)
    obs = np.zeros((length, n, OBS_DIM))
    actions = np.zeros((length, n, ACT_DIM))
    log_probs = np.zeros((length, n))
    rewards = np.zeros((length, n))
    values = np.zeros((length, n))
    dones = np.zeros((length, n))
    buf_stats = {"ep_returns": [], "ep_lengths": [], "Ly_errs": [], "Lx_errs": []}

    for t in range(length):
        obs[t] = pool.obs
        act, logp = policy.sample(pool.obs, rng, sigma_override)
        actions[t], log_probs[t] = act, logp
        values[t] = value.forward(pool.obs)
        for i, env in enumerate(pool.envs):
            out = env.env_step(Action.from_vector(act[i]))
            rewards[t, i] = out.reward
            pool.ep_return[i] += out.reward
            pool.ep_len[i] += 1
            if out.info.get("step_end"):
                buf_stats["Ly_errs"].append(abs(out.info["Ly_err_end"]))
                buf_stats["Lx_errs"].append(abs(out.info["Lx_err_end"]))
            if out.terminated or out.truncated:
                dones[t, i] = 1.0
                buf_stats["ep_returns"].append(pool.ep_return[i])
                buf_stats["ep_lengths"].append(pool.ep_len[i])
                pool.ep_return[i] = 0.0
                pool.ep_len[i] = 0
                pool.obs[i] = env.reset_episode(seed=_draw_seed(rng)).as_vector()
            else:
                pool.obs[i] = out.obs_next.as_vector()

    last_values = value.forward(pool.obs)
    return RolloutBuffer(obs, actions, log_probs, rewards, values, dones, last_values, **buf_stats)


def compute_gae(buffer: RolloutBuffer, gamma, lam) -> RolloutBuffer:
    """A_t = sum_l (gamma*lam)^l delta_{t+l}; returns = A + V. Arrays are (T,) or (T, n_envs)."""
    rewards = np.asarray(buffer.rewards, dtype=float)
    one_env = rewards.ndim == 1
    r = rewards.reshape(rewards.shape[0], -1)
    v = np.asarray(buffer.values, dtype=float).reshape(r.shape)
    d = np.asarray(buffer.dones, dtype=float).reshape(r.shape)
    v_next_last = np.asarray(buffer.last_values, dtype=float).reshape(r.shape[1])
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1])
    for t in range(r.shape[0] - 1, -1, -1):
        v_next = v_next_last if t == r.shape[0] - 1 else v[t + 1]
        not_done = 1.0 - d[t]
        delta = r[t] + gamma * v_next * not_done - v[t]
        running = delta + gamma * lam * not_done * running
        adv[t] = running
    ret = adv + v
    if not np.all(np.isfinite(adv)):
        raise NonFiniteLoss("non-finite advantages")
    buffer.advantages = adv[:, 0] if one_env else adv
    buffer.returns = ret[:, 0] if one_env else ret
    return buffer


def surrogate_gradient(policy: MlpPolicy, obs, actions, log_probs_old, advantages, clip_eps):
    """Clipped surrogate and its gradient w.r.t. the policy parameters (ascent direction)."""
    mean = policy.forward(obs)
    log_std = policy.log_std
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - log_probs_old)
    A = advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surrogate = float(np.mean(np.minimum(ratio * A, clipped * A)))
    saturated = ((A > 0) & (ratio > 1.0 + clip_eps)) | ((A < 0) & (ratio < 1.0 - clip_eps))
    coef = np.where(saturated, 0.0, A * ratio) / A.size
    dmean = coef[:, None] * (actions - mean) / np.exp(2.0 * log_std)
    grads = policy.backward(dmean)
    stats = {
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - (logp - log_probs_old))),
    }
    return surrogate, grads, stats


def _clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        raise NonFiniteLoss("non-finite gradient")
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def make_optimizers(policy, value, cfg: PpoConfig):
    return (RmsProp(policy.params(), cfg.lr_policy, cfg.rms_decay, cfg.rms_eps),
            RmsProp(value.params(), cfg.lr_value, cfg.rms_decay, cfg.rms_eps))


def ppo_update(policy: MlpPolicy, value: ValueNet, buffer: RolloutBuffer, cfg: PpoConfig, rng,
               optimizers=None) -> dict:
    if buffer.advantages is None:
        raise InvalidParams("compute_gae must run before ppo_update")
    opt_pi, opt_v = optimizers or make_optimizers(policy, value, cfg)
    obs, act = buffer.flat("obs"), buffer.flat("actions")
    logp_old = buffer.log_probs.reshape(-1)
    ret = buffer.returns.reshape(-1)
    adv = buffer.advantages.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    N = adv.size
    mb = min(cfg.minibatch_size, N)
    totals = {"surrogate": 0.0, "value_loss": 0.0, "clip_frac": 0.0, "approx_kl": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        for start in range(0, N, mb):
            idx = perm[start:start + mb]
            surr, g_pi, stats = surrogate_gradient(policy, obs[idx], act[idx], logp_old[idx], adv[idx], cfg.clip_eps)
            v = value.forward(obs[idx])
            err = v - ret[idx]
            v_loss = float(np.mean(err * err))
            if not (math.isfinite(surr) and math.isfinite(v_loss)):
                raise NonFiniteLoss(f"surrogate={surr} value_loss={v_loss}")
            g_v = value.backward(2.0 * err / idx.size)
            opt_pi.step(_clip_global_norm([-g for g in g_pi], cfg.max_grad_norm))
            opt_v.step(_clip_global_norm(g_v, cfg.max_grad_norm))
            totals["surrogate"] += surr
            totals["value_loss"] += v_loss
            totals["clip_frac"] += stats["clip_frac"]
            totals["approx_kl"] += stats["approx_kl"]
            count += 1
    return {k: val / max(count, 1) for k, val in totals.items()}


@dataclass
class TrainResult:
    policy_path: Path
    value_path: Path
    metrics_path: Path
    metrics: pd.DataFrame


def build_networks(cfg: PpoConfig, env_cfg: EnvConfig):
    normalizer = ObsNormalizer(OBS_DIM)
    dims = (OBS_DIM, *cfg.hidden)
    policy = MlpPolicy(dims + (ACT_DIM,), (env_cfg.action_scale_pos,) * 2 + (env_cfg.action_scale_yaw,),
                       sigma_frac=cfg.sigma0, seed=cfg.seed, normalizer=normalizer)
    value = ValueNet(dims + (1,), seed=cfg.seed + 1, normalizer=normalizer)
    return policy, value


def _iteration_rng(seed, iteration):
    return np.random.default_rng([seed, iteration])


def _mean_or_nan(values):
    return float(np.mean(values)) if len(values) else float("nan")


def train(cfg: PpoConfig, env_cfg: EnvConfig, mpc_cfg, reward_cfg: Optional[RewardConfig], out_dir,
          resume=False, params=None, proxy: Optional[ProxyParams] = None,
          gait_sampler: Optional[GaitSampler] = None, meta=None, progress=True) -> TrainResult:
    """Collect, estimate advantages and update until max_env_steps; checkpoint each iteration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy_path, value_path = out / "policy.asrp", out / "value.asrp"
    state_path, metrics_path = out / "trainer_state.npz", out / "metrics.csv"

    policy, value = build_networks(cfg, env_cfg)
    optimizers = make_optimizers(policy, value, cfg)
    rows, start_iter, env_steps = [], 0, 0
    if resume and state_path.exists():
        policy, value, optimizers, rows, start_iter, env_steps = _restore(
            cfg, policy_path, value_path, state_path)
        logger.info("resuming at iteration %d (%d env steps)", start_iter, env_steps)
    elif resume:
        logger.warning("no trainer state in %s; starting fresh", out)

    envs = [GaitEnv(params, mpc_cfg, proxy, env_cfg, reward_cfg, gait_sampler) for _ in range(cfg.n_envs)]
    pool = EnvPool(envs, np.random.default_rng([cfg.seed, start_iter, 1]))
    sigma0, sigma_final, horizon = cfg.sigma_schedule

    policy_net.save(policy, policy_path)
    policy_net.save(value, value_path)
    iterations = range(start_iter, cfg.n_iterations)
    for it in tqdm(iterations, desc="ppo", disable=not progress):
        rng = _iteration_rng(cfg.seed, it)
        frac = sigma_schedule(env_steps / horizon if horizon else 1.0, sigma0, sigma_final)
        policy.set_sigma(frac)
        buffer = collect_rollouts(pool, policy, value, cfg.rollout_len, rng)
        compute_gae(buffer, cfg.gamma, cfg.gae_lambda)
        try:
            stats = ppo_update(policy, value, buffer, cfg, rng, optimizers)
        except NonFiniteLoss:
            policy_net.save(policy, out / "divergence_policy.asrp")
            policy_net.save(value, out / "divergence_value.asrp")
            logger.error("training diverged at iteration %d; state dumped to %s", it, out)
            raise
        policy.normalizer.update(buffer.flat("obs"))
        env_steps += len(buffer)
        mean_return = _mean_or_nan(buffer.ep_returns)
        if math.isnan(mean_return):
            mean_return = float(np.mean(pool.ep_return))
        rows.append({
            "iter": it, "env_steps": env_steps, "mean_return": mean_return,
            "mean_ep_len": _mean_or_nan(buffer.ep_lengths) if buffer.ep_lengths else float(np.mean(pool.ep_len)),
            "mean_Ly_err": _mean_or_nan(buffer.Ly_errs), "mean_Lx_err": _mean_or_nan(buffer.Lx_errs),
            "clip_frac": stats["clip_frac"], "approx_kl": stats["approx_kl"], "sigma": frac,
        })
        logger.info("iter %d steps %d return %.3f |Ly err| %.4f clip %.3f", it, env_steps, mean_return,
                    rows[-1]["mean_Ly_err"], stats["clip_frac"])
        policy_net.save(policy, policy_path)
        policy_net.save(value, value_path)
        _save_state(state_path, it + 1, env_steps, optimizers, rows)
        write_csv(metrics_path, pd.DataFrame(rows, columns=METRIC_COLUMNS), meta)

    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    write_csv(metrics_path, frame, meta)
    return TrainResult(policy_path, value_path, metrics_path, frame)


def _save_state(path, next_iter, env_steps, optimizers, rows):
    arrays = {"next_iter": np.array(next_iter), "env_steps": np.array(env_steps),
              "metrics": pd.DataFrame(rows, columns=METRIC_COLUMNS).to_numpy(dtype=float)}
    for tag, opt in zip(("pi", "v"), optimizers):
        for k, s in enumerate(opt.state()):
            arrays[f"{tag}_{k}"] = s
    np.savez(path, **arrays)


def _restore(cfg, policy_path, value_path, state_path):
    policy, value = policy_net.load(policy_path), policy_net.load(value_path)
    value.normalizer = policy.normalizer
    optimizers = make_optimizers(policy, value, cfg)
    with np.load(state_path) as state:
        for tag, opt in zip(("pi", "v"), optimizers):
            opt.load_state([state[f"{tag}_{k}"] for k in range(len(opt.sq))])
        rows = [dict(zip(METRIC_COLUMNS, r)) for r in state["metrics"].reshape(-1, len(METRIC_COLUMNS))]
        for r in rows:
            r["iter"], r["env_steps"] = int(r["iter"]), int(r["env_steps"])
        return policy, value, optimizers, rows, int(state["next_iter"]), int(state["env_steps"])


def evaluate_policy(env: GaitEnv, policy: Optional[MlpPolicy], seeds, max_env_steps=None) -> pd.DataFrame:
    """Deterministic rollouts with the policy mean (zero residual when policy is None)."""
    records = []
    for seed in seeds:
        obs = env.reset_episode(seed=int(seed))
        total, steps, ly, lx, terminated = 0.0, 0, [], [], False
        while True:
            a = np.zeros(ACT_DIM) if policy is None else policy.forward(obs.as_vector())
            out = env.env_step(Action.from_vector(a))
            total += out.reward
            steps += 1
            if out.info.get("step_end"):
                ly.append(abs(out.info["Ly_err_end"]))
                lx.append(abs(out.info["Lx_err_end"]))
            obs = out.obs_next
            if out.terminated or out.truncated or (max_env_steps and steps >= max_env_steps):
                terminated = out.terminated
                break
        records.append({"seed": int(seed), "return": total, "length": steps, "mean_Ly_err": _mean_or_nan(ly),
                        "mean_Lx_err": _mean_or_nan(lx), "terminated": terminated})
    return pd.DataFrame(records)
