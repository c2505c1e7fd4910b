"""Flat `key = value` settings files.

Keys are dotted by section (alip., mpc., proxy., env., reward., policy., ppo.,
experiment., track., push., turn., slope.). Every known key has a default in
DEFAULTS; a settings dict only holds the keys a file (or the command line) set.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from alip_core import AlipParams
from errors import ConfigError
from footstep_mpc import MpcConfig
from gait_env import EnvConfig, GaitSampler, ProxyParams, RewardConfig
from ppo_trainer import PpoConfig
from utils import config_hash

logger = logging.getLogger(__name__)

PAIR_KEYS = {"track.profile"}

DEFAULTS = {
    # robot and step timing
    "alip.m": 39.0,
    "alip.g": 9.81,
    "alip.z_H": 0.69,
    "alip.T_s": 0.25,
    "alip.dt": 0.0125,
    "alip.W": 0.25,
    # footstep MPC
    "mpc.N_s": 3,
    "mpc.q_weight": 1.0,
    "mpc.qf_factor": 10.0,
    "mpc.kin_box": (0.35, 0.35),
    "mpc.mu": 0.7,
    "mpc.u_bounds": (0.5, 0.6),
    "mpc.min_width": 0.05,
    "mpc.slack_penalty": 1e6,
    "mpc.tol": 1e-8,
    "mpc.max_iter": 4000,
    # proxy simulator mismatch
    "proxy.distal_mass_frac": 0.0,
    "proxy.impact_loss": 0.0,
    "proxy.zc_ripple_amp": 0.0,
    "proxy.obs_noise_std": 0.0,
    "proxy.slope": 0.0,
    "proxy.sim_dt": 1.0 / 456.0,
    # environment
    "env.f_plan": 114.0,
    "env.leg_length": 0.8625,
    "env.action_scale_pos": 0.1,
    "env.action_scale_yaw": 0.2,
    "env.base_policy": "mpc",
    "env.max_steps": 40,
    "env.init_noise": 0.0,
    "env.push_prob": 0.0,
    "env.resample_every": 0,
    "env.vx_range": (0.0, 0.0),
    "env.vy_range": (0.0, 0.0),
    "env.yaw_rate_range": (0.0, 0.0),
    # reward
    "reward.r_a": 1.0,
    "reward.w_Lx": 1.0,
    "reward.s_Lx": 2.7,
    "reward.w_Ly": 1.0,
    "reward.s_Ly": 2.7,
    "reward.w_gamma": 0.5,
    "reward.s_gamma": 0.1,
    "reward.w_Lx_sw": 0.05,
    "reward.s_Lx_sw": 2.7,
    "reward.w_Ly_sw": 0.05,
    "reward.s_Ly_sw": 2.7,
    "reward.w_pi": 0.02,
    "reward.s_pi": 0.05,
    "reward.w_zH": 1.0,
    "reward.w_phi": 1.0,
    "reward.z_min_frac": 0.7,
    "reward.z_max_frac": 1.3,
    "reward.L_max_frac": 1.5,
    # networks
    "policy.hidden": (64, 64),
    "policy.sigma0": 0.5,
    "policy.sigma_final": 0.05,
    "policy.sigma_horizon": 0,
    # PPO
    "ppo.clip_eps": 0.2,
    "ppo.gamma": 0.99,
    "ppo.gae_lambda": 0.95,
    "ppo.n_envs": 4,
    "ppo.rollout_len": 1024,
    "ppo.epochs": 5,
    "ppo.minibatch_size": 512,
    "ppo.lr_policy": 3e-4,
    "ppo.lr_value": 1e-3,
    "ppo.max_env_steps": 2_000_000,
    "ppo.seed": 0,
    "ppo.max_grad_norm": 0.5,
    # experiments
    "orbit.vx": 0.0,
    "orbit.vy": 0.0,
    "experiment.name": "run",
    "experiment.checkpoint": "mpc-only",
    "experiment.seeds": (0, 1, 2, 3, 4),
    "track.profile": ((0.0, 0.0), (2.0, 0.5), (4.0, 0.925), (6.0, -0.5)),
    "track.duration": 8.0,
    "push.directions": 8,
    "push.types": ("short", "medium", "long"),
    "push.max_force": 1000.0,
    "push.bisect_iters": 10,
    "push.warmup_steps": 4,
    "push.survive_steps": 10,
    "push.protocol": "independent",
    "push.force_step": 10.0,
    "turn.yaw_rate": 1.27,
    "turn.max_steps": 60,
    "slope.values": (0.0, 0.05, 0.1, 0.15, 0.2007),
}


def _parse_scalar(key, raw, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def parse_value(key, raw):
    """Parse a raw string using the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown setting {key!r}")
    like = DEFAULTS[key]
    if key in PAIR_KEYS:
        pairs = []
        for item in filter(None, (p.strip() for p in raw.split(","))):
            t, sep, v = item.partition(":")
            if not sep:
                raise ConfigError(f"{key}: expected t:v pairs, got {item!r}")
            pairs.append((_parse_scalar(key, t, 0.0), _parse_scalar(key, v, 0.0)))
        if not pairs:
            raise ConfigError(f"{key}: empty profile")
        return tuple(pairs)
    if isinstance(like, tuple):
        items = [p for p in (s.strip() for s in raw.split(",")) if p]
        return tuple(_parse_scalar(key, p, like[0]) for p in items)
    return _parse_scalar(key, raw, like)


def parse_settings(text, source="<string>"):
    settings = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown setting {key!r}")
        settings[key] = parse_value(key, raw)
    return settings


def load_settings(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    settings = parse_settings(path.read_text(encoding="utf-8"), str(path))
    logger.debug("loaded %d settings from %s", len(settings), path)
    return settings


def get_setting(settings, key):
    """Configured value of key, or its default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown setting {key!r}")
    return settings.get(key, DEFAULTS[key])


def set_setting(settings, key, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown setting {key!r}")
    settings[key] = parse_value(key, value) if isinstance(value, str) else value


def effective(settings):
    return {key: get_setting(settings, key) for key in DEFAULTS}


def settings_hash(settings):
    return config_hash(effective(settings))


def _section(settings, prefix):
    return {key[len(prefix) + 1:]: get_setting(settings, key) for key in DEFAULTS if key.startswith(prefix + ".")}


def alip_params(settings) -> AlipParams:
    return AlipParams(**_section(settings, "alip"))


def mpc_config(settings) -> MpcConfig:
    s = _section(settings, "mpc")
    s["mu_friction"] = s.pop("mu")
    return MpcConfig(**s)


def proxy_params(settings) -> ProxyParams:
    return ProxyParams(**_section(settings, "proxy"))


def env_config(settings) -> EnvConfig:
    s = _section(settings, "env")
    for key in ("vx_range", "vy_range", "yaw_rate_range"):
        s.pop(key)
    return EnvConfig(**s)


def gait_sampler(settings, params: AlipParams) -> GaitSampler:
    ranges = {}
    for key in ("vx_range", "vy_range", "yaw_rate_range"):
        value = get_setting(settings, f"env.{key}")
        if len(value) != 2:
            raise ConfigError(f"env.{key} needs two values (lo, hi)")
        ranges[key] = value
    return GaitSampler.from_velocity(params, ranges["vx_range"], ranges["vy_range"], ranges["yaw_rate_range"])


def reward_config(settings, params: AlipParams) -> RewardConfig:
    s = _section(settings, "reward")
    z_lo, z_hi, l_frac = s.pop("z_min_frac"), s.pop("z_max_frac"), s.pop("L_max_frac")
    L_max = l_frac * params.mzh * 0.925
    return RewardConfig.from_params(params, z_min=z_lo * params.z_H, z_max=z_hi * params.z_H,
                                    L_min=-L_max, L_max=L_max, **s)


def policy_config(settings):
    return _section(settings, "policy")


def ppo_config(settings) -> PpoConfig:
    s = _section(settings, "ppo")
    pol = policy_config(settings)
    return PpoConfig(hidden=pol["hidden"], sigma0=pol["sigma0"], sigma_final=pol["sigma_final"],
                     sigma_horizon=pol["sigma_horizon"], **s)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    controller: str
    checkpoint: Optional[Path]
    seeds: tuple
    config_path: Optional[Path]
    config_hash: str


def parse_controller(value):
    """'mpc-only' | 'rl-only:<path>' | '<path>' -> (controller, checkpoint path)."""
    if value == "mpc-only":
        return "mpc-only", None
    if value.startswith("rl-only"):
        _, sep, rest = value.partition(":")
        if not sep or not rest:
            raise ConfigError("rl-only needs a checkpoint: 'rl-only:<path>'")
        return "rl-only", Path(rest)
    return "mpc+rl", Path(value)


def experiment_spec(settings, config_path=None) -> ExperimentSpec:
    controller, checkpoint = parse_controller(get_setting(settings, "experiment.checkpoint"))
    if checkpoint is not None and not checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    seeds = tuple(int(s) for s in get_setting(settings, "experiment.seeds"))
    if not seeds:
        raise ConfigError("experiment.seeds must not be empty")
    return ExperimentSpec(get_setting(settings, "experiment.name"), controller, checkpoint, seeds,
                          Path(config_path) if config_path else None, settings_hash(settings))
