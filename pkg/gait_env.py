"""Residual-MDP environment on a mismatched reduced-order gait simulator.

The proxy integrates the ALIP flow with extra terms the planner does not model: the
swing foot carries a fraction of the mass (reaction and gravity moment), foot switches
lose angular momentum, the CoM height ripples, the ground may be sloped and the torso
can be pushed. The footstep MPC (or the nominal orbit footholds) is the base policy and
the agent's action is added to its output.
"""
import dataclasses
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium import spaces
from scipy.linalg import expm

from alip_core import (
    AlipParams,
    GaitCommand,
    StanceSign,
    alip_transition,
    orbit_start_state,
    periodic_orbit,
    rotate_state,
    system_matrices,
)
from errors import InvalidParams, OverlappingPush, StaleEnv
from footstep_mpc import MpcConfig, nominal_plan, plan, replan_schedule
from utils import rot2, validate_positive, validate_range, wrap_angle, write_csv

logger = logging.getLogger(__name__)

OBS_DIM = 23
ACT_DIM = 3
V_MAX = 0.925

# name -> (force N, duration s); the medium push is evaluation-only
PUSH_TYPES = {"short": (350.0, 0.0175), "medium": (100.0, 0.1), "long": (35.0, 1.0)}
TRAINING_PUSHES = ("long", "short")

TRAJECTORY_COLUMNS = [
    "t", "sigma", "T_r", "x_c", "y_c", "z_c", "L_x", "L_y", "L_z",
    "u_x_base", "u_y_base", "u_x_res", "u_y_res", "gamma_total", "reward", "terminated",
]


@dataclass(frozen=True)
class ProxyParams:
    distal_mass_frac: float = 0.0
    impact_loss: float = 0.0
    zc_ripple_amp: float = 0.0
    obs_noise_std: float = 0.0
    slope: float = 0.0
    sim_dt: float = 1.0 / 456.0

    def __post_init__(self):
        validate_range("distal_mass_frac", self.distal_mass_frac, 0.0, 0.5)
        validate_range("impact_loss", self.impact_loss, 0.0, 1.0)
        validate_range("zc_ripple_amp", self.zc_ripple_amp, 0.0, np.inf)
        validate_range("obs_noise_std", self.obs_noise_std, 0.0, np.inf)
        validate_range("slope", self.slope, -math.pi / 2, math.pi / 2)
        validate_positive("sim_dt", self.sim_dt)

    def check_plan_rate(self, f_plan):
        ratio = 1.0 / (f_plan * self.sim_dt)
        if ratio < 1.0 - 1e-9 or abs(ratio - round(ratio)) > 1e-6 * ratio:
            raise InvalidParams(f"sim_dt={self.sim_dt} must divide 1/f_plan={1.0 / f_plan}")


@dataclass(frozen=True)
class GaitSampler:
    """Uniform ranges for the gait command, in momentum units and rad/s."""

    L_x_offset: tuple = (0.0, 0.0)
    L_y_des: tuple = (0.0, 0.0)
    yaw_rate: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("L_x_offset", "L_y_des", "yaw_rate"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidParams(f"{name} range is empty: {lo} > {hi}")

    @classmethod
    def from_velocity(cls, params: AlipParams, vx=(0.0, 0.0), vy=(0.0, 0.0), yaw_rate=(0.0, 0.0)):
        mzh = params.mzh
        # lateral CoM velocity is -L_x/(m z_H)
        return cls((-mzh * vy[1], -mzh * vy[0]), (mzh * vx[0], mzh * vx[1]), tuple(yaw_rate))

    @classmethod
    def fixed(cls, gait: GaitCommand):
        return cls((gait.L_x_offset,) * 2, (gait.L_y_des,) * 2, (gait.yaw_rate_des,) * 2)

    def sample(self, rng, T_s):
        return GaitCommand(
            L_x_offset=float(rng.uniform(*self.L_x_offset)),
            L_y_des=float(rng.uniform(*self.L_y_des)),
            yaw_rate_des=float(rng.uniform(*self.yaw_rate)),
            T_s=T_s,
        )


@dataclass(frozen=True)
class EnvConfig:
    f_plan: float = 114.0
    leg_length: float = 0.8625
    action_scale_pos: float = 0.1
    action_scale_yaw: float = 0.2
    base_policy: str = "mpc"
    max_steps: int = 40
    init_noise: float = 0.0
    push_prob: float = 0.0
    resample_every: int = 0
    log_trajectory: bool = True

    def __post_init__(self):
        validate_positive("f_plan", self.f_plan)
        validate_positive("leg_length", self.leg_length)
        validate_positive("action_scale_pos", self.action_scale_pos)
        validate_positive("action_scale_yaw", self.action_scale_yaw)
        if self.base_policy not in ("mpc", "nominal"):
            raise InvalidParams(f"base_policy must be 'mpc' or 'nominal', got {self.base_policy!r}")
        if self.max_steps < 1:
            raise InvalidParams("max_steps must be >= 1")
        validate_range("push_prob", self.push_prob, 0.0, 1.0, hi_inclusive=True)


@dataclass(frozen=True)
class RewardConfig:
    r_a: float = 1.0
    w_Lx: float = 1.0
    s_Lx: float = 2.7
    w_Ly: float = 1.0
    s_Ly: float = 2.7
    w_gamma: float = 0.5
    s_gamma: float = 0.1
    w_Lx_sw: float = 0.05
    s_Lx_sw: float = 2.7
    w_Ly_sw: float = 0.05
    s_Ly_sw: float = 2.7
    w_pi: float = 0.02
    s_pi: float = 0.05
    w_zH: float = 1.0
    w_phi: float = 1.0
    z_H: float = 0.69
    z_min: float = 0.483
    z_max: float = 0.897
    L_min: float = -37.34
    L_max: float = 37.34
    lx_main: float = 0.0
    T_s: float = 0.25

    def __post_init__(self):
        for name in ("w_Lx", "s_Lx", "w_Ly", "s_Ly", "w_gamma", "s_gamma", "w_Lx_sw", "s_Lx_sw",
                     "w_Ly_sw", "s_Ly_sw", "w_pi", "s_pi", "w_zH", "w_phi", "T_s"):
            validate_positive(name, getattr(self, name))
        if not self.z_min < self.z_H < self.z_max:
            raise InvalidParams("need z_min < z_H < z_max")
        if not self.L_min < self.L_max:
            raise InvalidParams("need L_min < L_max")

    @classmethod
    def from_params(cls, params: AlipParams, **overrides):
        """Bounds scaled to the robot: z_c in [0.7, 1.3] z_H, |L| <= 1.5 m z_H v_max."""
        L_max = 1.5 * params.mzh * V_MAX
        lx_main = periodic_orbit(params, GaitCommand(T_s=params.T_s), StanceSign.LEFT).lx_main
        base = dict(z_H=params.z_H, z_min=0.7 * params.z_H, z_max=1.3 * params.z_H,
                    L_min=-L_max, L_max=L_max, lx_main=lx_main, T_s=params.T_s)
        base.update(overrides)
        return cls(**base)


@dataclass
class Observation:
    sigma: int
    T_r: float
    alpha: np.ndarray
    psi: np.ndarray
    beta: np.ndarray
    prev_total_action: np.ndarray

    def __post_init__(self):
        if self.sigma not in (-1, 1):
            raise InvalidParams(f"sigma must be +-1, got {self.sigma!r}")
        if self.T_r < 0:
            raise InvalidParams(f"T_r must be >= 0, got {self.T_r!r}")
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(6)
        self.psi = np.asarray(self.psi, dtype=float).reshape(9)
        self.psi[:6] = wrap_angle(self.psi[:6])
        self.beta = np.asarray(self.beta, dtype=float).reshape(3)
        self.prev_total_action = np.asarray(self.prev_total_action, dtype=float).reshape(3)

    def as_vector(self):
        return np.concatenate([[float(self.sigma), self.T_r], self.alpha, self.psi, self.beta,
                               self.prev_total_action])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (OBS_DIM,):
            raise InvalidParams(f"observation must have {OBS_DIM} entries, got {vec.shape}")
        return cls(int(round(vec[0])), float(vec[1]), vec[2:8], vec[8:17], vec[17:20], vec[20:23])


@dataclass
class Action:
    u_res: np.ndarray = field(default_factory=lambda: np.zeros(2))
    gamma_res: float = 0.0

    def clamped(self, scale_pos, scale_yaw):
        return Action(np.clip(np.asarray(self.u_res, dtype=float), -scale_pos, scale_pos),
                      float(np.clip(self.gamma_res, -scale_yaw, scale_yaw)))

    def as_vector(self):
        return np.array([self.u_res[0], self.u_res[1], self.gamma_res])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float).reshape(ACT_DIM)
        return cls(vec[:2].copy(), float(vec[2]))


@dataclass
class StepOutcome:
    obs_next: Observation
    reward: float
    terminated: bool
    info: dict
    truncated: bool = False


def kernel(e, weight, width):
    """Ker_v(e) = w * exp(-(e/width)^2)."""
    return weight * np.exp(-(np.asarray(e, dtype=float) / width) ** 2)


def termination(s: Observation, cfg: RewardConfig):
    z_c, L_x, L_y = s.alpha[2], s.alpha[3], s.alpha[4]
    return bool(not (cfg.z_min <= z_c <= cfg.z_max)
                or not (cfg.L_min <= L_x <= cfg.L_max)
                or not (cfg.L_min <= L_y <= cfg.L_max))


def reward(s: Observation, a, s_next: Observation, cfg: RewardConfig):
    """Transition reward; a is the total action (base + residual) taken at s."""
    if termination(s_next, cfg):
        return 0.0
    L_off, L_y_des, _ = s.beta
    L_x, L_y = s_next.alpha[3], s_next.alpha[4]
    e_Ly = L_y - L_y_des
    if s_next.sigma == s.sigma:
        e_Lx_bar = max(0.0, abs(L_x - L_off) - abs(cfg.lx_main))
        r_pi = 0.0
        # the first interval of a step has no earlier command from the same stance
        if s.T_r < cfg.T_s - 1e-9:
            r_pi = float(np.sum(kernel(np.asarray(a, dtype=float) - s.prev_total_action, cfg.w_pi, cfg.s_pi)))
        return float(kernel(e_Lx_bar, cfg.w_Lx_sw, cfg.s_Lx_sw) + kernel(e_Ly, cfg.w_Ly_sw, cfg.s_Ly_sw) + r_pi)
    # the step that just ended had stance s.sigma
    e_Lx = L_x - (s.sigma * cfg.lx_main + L_off)
    roll, pitch, yaw_rel = s_next.psi[0], s_next.psi[1], s_next.psi[2]
    r_zH = -cfg.w_zH * abs(s_next.alpha[2] - cfg.z_H)
    r_phi = -cfg.w_phi * (roll ** 2 + pitch ** 2)
    return float(cfg.r_a + kernel(e_Lx, cfg.w_Lx, cfg.s_Lx) + kernel(e_Ly, cfg.w_Ly, cfg.s_Ly)
                 + kernel(yaw_rel, cfg.w_gamma, cfg.s_gamma) + r_zH + r_phi)


@functools.lru_cache(maxsize=64)
def _zoh_input_matrix(params: AlipParams, h):
    """Gamma(h) = int_0^h exp(A s) ds from the augmented exponential."""
    A, _ = system_matrices(params)
    aug = np.zeros((8, 8))
    aug[:4, :4] = A
    aug[:4, 4:] = np.eye(4)
    return expm(aug * h)[:4, 4:]


def proxy_dynamics(state, swing_foot_accel, dt, params: AlipParams, proxy: ProxyParams,
                   swing_foot_pos=None, push_force=(0.0, 0.0)):
    """Advance the proxy state by dt with the mismatch input held constant.

    state is (x_c, y_c, L_x, L_y) relative to the stance contact in world axes;
    swing_foot_pos is relative to the same contact and push_force acts at CoM height.
    """
    if dt > proxy.sim_dt * (1 + 1e-9):
        raise InvalidParams(f"dt={dt} exceeds sim_dt={proxy.sim_dt}")
    x = np.asarray(state, dtype=float)
    acc = np.asarray(swing_foot_accel, dtype=float)
    eps, m, g, z_H = proxy.distal_mass_frac, params.m, params.g, params.z_H
    Fx, Fy = push_force
    dLx = eps * m * z_H * acc[1] - z_H * Fy
    dLy = -eps * m * z_H * acc[0] + z_H * Fx
    if swing_foot_pos is not None:
        offset = np.asarray(swing_foot_pos, dtype=float) - x[:2]
        dLy += eps * m * g * offset[0]
        dLx -= eps * m * g * offset[1]
    if proxy.slope:
        dLy += m * g * ((math.cos(proxy.slope) - 1.0) * x[0] - z_H * math.sin(proxy.slope))
    out = alip_transition(params, dt) @ x
    if dLx or dLy:
        out = out + _zoh_input_matrix(params, dt) @ np.array([0.0, 0.0, dLx, dLy])
    return out


class _SwingSegment:
    """Cubic Hermite from (p0, v0) to (p1, 0) over [t0, t0 + T]; works for vectors and scalars."""

    def __init__(self, t0, T, p0, v0, p1):
        self.t0, self.T = t0, max(T, 1e-9)
        self.p0, self.v0, self.p1 = np.asarray(p0, float), np.asarray(v0, float), np.asarray(p1, float)

    def _tau(self, t):
        return min(max((t - self.t0) / self.T, 0.0), 1.0)

    def pos(self, t):
        s = self._tau(t)
        return ((2 * s**3 - 3 * s**2 + 1) * self.p0 + (s**3 - 2 * s**2 + s) * self.T * self.v0
                + (-2 * s**3 + 3 * s**2) * self.p1)

    def vel(self, t):
        s = self._tau(t)
        return ((6 * s**2 - 6 * s) * self.p0 + (3 * s**2 - 4 * s + 1) * self.T * self.v0
                + (-6 * s**2 + 6 * s) * self.p1) / self.T

    def acc(self, t):
        s = self._tau(t)
        return ((12 * s - 6) * self.p0 + (6 * s - 4) * self.T * self.v0 + (-12 * s + 6) * self.p1) / self.T**2


class GaitEnv(gym.Env):
    """One env step = one planning interval (1/f_plan, or a whole swing at low rates)."""

    metadata = {"render_modes": []}

    def __init__(self, params: Optional[AlipParams] = None, mpc_cfg: Optional[MpcConfig] = None,
                 proxy: Optional[ProxyParams] = None, env_cfg: Optional[EnvConfig] = None,
                 reward_cfg: Optional[RewardConfig] = None, gait_sampler: Optional[GaitSampler] = None):
        super().__init__()
        self.params = params or AlipParams()
        self.env_cfg = env_cfg or EnvConfig()
        self.mpc_cfg = None
        if self.env_cfg.base_policy == "mpc":
            self.mpc_cfg = mpc_cfg or MpcConfig()
        self.proxy = proxy or ProxyParams()
        self.proxy.check_plan_rate(self.env_cfg.f_plan)
        lx_main = periodic_orbit(self.params, GaitCommand(T_s=self.params.T_s), StanceSign.LEFT).lx_main
        base_reward = reward_cfg or RewardConfig.from_params(self.params)
        self.reward_cfg = dataclasses.replace(base_reward, z_H=self.params.z_H, lx_main=lx_main,
                                              T_s=self.params.T_s)
        self.sampler = gait_sampler or GaitSampler()
        self.schedule = replan_schedule(self.env_cfg.f_plan, self.params.T_s)
        self.low_frequency = len(self.schedule) == 1

        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(OBS_DIM,), dtype=np.float64)
        scale = np.array([self.env_cfg.action_scale_pos] * 2 + [self.env_cfg.action_scale_yaw])
        self.action_space = spaces.Box(-scale, scale, dtype=np.float64)
        self.terminated = True
        self.trajectory = []

    # ------------------------------------------------------------------ episode

    def reset_episode(self, seed=None, gait_sampler: Optional[GaitSampler] = None,
                      proxy: Optional[ProxyParams] = None) -> Observation:
        """Start on (or near) the periodic orbit with a freshly sampled command."""
        if proxy is not None:
            proxy.check_plan_rate(self.env_cfg.f_plan)
            self.proxy = proxy
        if gait_sampler is not None:
            self.sampler = gait_sampler
        super().reset(seed=seed)
        self.rng = self.np_random
        p = self.params
        self.gait = self.sampler.sample(self.rng, p.T_s)
        self.sigma = StanceSign.LEFT
        self.x = orbit_start_state(p, self.gait, self.sigma).as_array()
        if self.env_cfg.init_noise > 0:
            self.x[2:] += self.rng.normal(0.0, self.env_cfg.init_noise * p.mzh, 2)
        prev_foothold = periodic_orbit(p, self.gait, self.sigma.flipped()).foothold
        self.t = 0.0
        self.t_step = 0.0
        self.plan_index = 0
        self.steps_taken = 0
        self.env_steps = 0
        self.torso_yaw = 0.0
        self.stance_yaw = 0.0
        self.swing_pos = -prev_foothold
        self.swing_vel = np.zeros(2)
        self.swing_yaw = 0.0
        self.swing_yaw_rate = 0.0
        self.swing_acc = np.zeros(2)
        self.tilt = np.zeros(2)
        self.tilt_rate = np.zeros(2)
        self.prev_total = np.zeros(ACT_DIM)
        self.push = None
        self.terminated = False
        self.trajectory = []
        self._maybe_schedule_training_push()
        self._clean, self._noisy = self._observe()
        return self._noisy

    def reset(self, *, seed=None, options=None):
        options = options or {}
        obs = self.reset_episode(seed=seed, gait_sampler=options.get("gait_sampler"),
                                 proxy=options.get("proxy"))
        return obs.as_vector(), {"gait": self.gait}

    def step(self, action):
        out = self.env_step(Action.from_vector(action))
        return out.obs_next.as_vector(), out.reward, out.terminated, out.truncated, out.info

    def set_command(self, gait: GaitCommand):
        self.gait = gait
        self._clean, self._noisy = self._observe()

    @property
    def observation(self):
        return self._noisy

    @property
    def true_observation(self):
        return self._clean

    @property
    def T_r(self):
        return max(self.params.T_s - self.t_step, 0.0)

    # -------------------------------------------------------------------- pushes

    def apply_push(self, force, duration, direction, t_start):
        """Schedule a push (heading-frame direction) over [t_start, t_start + duration]."""
        validate_positive("duration", duration)
        if self.push is not None:
            raise OverlappingPush(f"a push is already scheduled at t={self.push['t_start']:.3f}")
        self.push = {"force": float(force), "duration": float(duration),
                     "direction": float(direction), "t_start": float(t_start)}
        logger.debug("push scheduled: %s", self.push)

    def _maybe_schedule_training_push(self):
        if self.env_cfg.push_prob <= 0 or self.push is not None:
            return
        if self.rng.random() >= self.env_cfg.push_prob:
            return
        kind = TRAINING_PUSHES[int(self.rng.integers(len(TRAINING_PUSHES)))]
        force, duration = PUSH_TYPES[kind]
        direction = float(self.rng.integers(4)) * math.pi / 2
        self.apply_push(force, duration, direction, self.t + float(self.rng.uniform(0.0, self.params.T_s)))

    def _push_force(self, t0, h):
        if self.push is None:
            return np.zeros(2)
        start = self.push["t_start"]
        end = start + self.push["duration"]
        overlap = max(0.0, min(t0 + h, end) - max(t0, start))
        if overlap <= 0:
            return np.zeros(2)
        heading = self.torso_yaw + self.push["direction"]
        return self.push["force"] * overlap / h * np.array([math.cos(heading), math.sin(heading)])

    # ---------------------------------------------------------------- dynamics

    def _base_action(self):
        p = self.params
        if self.env_cfg.base_policy == "mpc":
            return plan(self._measured, self.T_r, self.gait, self.sigma, self.torso_yaw,
                        self.stance_yaw, self.mpc_cfg, p)
        return nominal_plan(self.gait, self.sigma, self.stance_yaw, 1, p)

    def env_step(self, a: Action) -> StepOutcome:
        if self.terminated:
            raise StaleEnv("episode is over; call reset first")
        cfg, p = self.env_cfg, self.params
        a = a.clamped(cfg.action_scale_pos, cfg.action_scale_yaw)
        s = self._clean

        base = self._base_action()
        base_rel = np.array([base.u0[0], base.u0[1], wrap_angle(base.gamma0 - self.stance_yaw)])
        total = base_rel + a.as_vector()
        target_pos = rot2(self.torso_yaw) @ total[:2]
        target_yaw = self.stance_yaw + total[2]
        T_rem = self.T_r
        seg = _SwingSegment(self.t_step, T_rem, self.swing_pos, self.swing_vel, target_pos)
        yaw_seg = _SwingSegment(self.t_step, T_rem, self.swing_yaw,
                                self.swing_yaw_rate, self.stance_yaw + wrap_angle(target_yaw - self.stance_yaw))

        nxt = self.plan_index + 1
        interval_end = self.schedule[nxt] if nxt < len(self.schedule) else p.T_s
        span = interval_end - self.t_step
        n_sub = max(1, math.ceil(span / self.proxy.sim_dt - 1e-9))
        h = span / n_sub
        applied_push = np.zeros(2)
        tilt_before = self.tilt.copy()
        for _ in range(n_sub):
            acc = seg.acc(self.t_step)
            force = self._push_force(self.t, h)
            applied_push = np.maximum(applied_push, np.abs(force))
            self.x = proxy_dynamics(self.x, acc, h, p, self.proxy, seg.pos(self.t_step), force)
            self.t += h
            self.t_step += h
            self.torso_yaw += self.gait.yaw_rate_des * h
            self.swing_acc = acc
        self.t_step = interval_end
        if self.push is not None and self.t >= self.push["t_start"] + self.push["duration"] - 1e-12:
            self.push = None
        self.swing_pos = seg.pos(self.t_step)
        self.swing_vel = seg.vel(self.t_step)
        self.swing_yaw = float(yaw_seg.pos(self.t_step))
        self.swing_yaw_rate = float(yaw_seg.vel(self.t_step))
        acc_h = rot2(-self.torso_yaw) @ self.swing_acc
        eps = self.proxy.distal_mass_frac
        self.tilt = np.array([-eps * acc_h[1] / p.g, eps * acc_h[0] / p.g])
        self.tilt_rate = (self.tilt - tilt_before) / span

        info = {"base_action": base_rel, "residual": a.as_vector(), "slack_norm": base.slack_norm,
                "push": applied_push, "step_end": False}
        if self.t_step >= p.T_s - 1e-9:
            self._impact(target_pos, info)
        else:
            self.plan_index = nxt
        self.prev_total = total
        self.env_steps += 1

        self._clean, self._noisy = self._observe()
        terminated = termination(self._clean, self.reward_cfg)
        r = reward(s, total, self._clean, self.reward_cfg)
        truncated = (not terminated) and self.steps_taken >= cfg.max_steps
        self.terminated = terminated or truncated
        info.update({"truncated": truncated, "steps": self.steps_taken, "t": self.t,
                     "torso_yaw": self.torso_yaw, "stance_yaw": self.stance_yaw})
        if cfg.log_trajectory:
            self._log_row(base_rel, a, total, r, terminated)
        return StepOutcome(self._noisy, r, terminated, info, truncated)

    def _impact(self, foothold, info):
        p = self.params
        pre = rotate_state(self.x, -self.torso_yaw)
        sigma_ended = int(self.sigma)
        lx_des = sigma_ended * self.reward_cfg.lx_main + self.gait.L_x_offset
        info.update({"step_end": True, "Ly_err_end": pre[3] - self.gait.L_y_des, "Lx_err_end": pre[2] - lx_des})
        self.x[:2] -= foothold
        self.x[2:] *= 1.0 - self.proxy.impact_loss
        old_stance_yaw = self.stance_yaw
        self.stance_yaw = self.swing_yaw
        self.swing_yaw = old_stance_yaw
        self.swing_yaw_rate = 0.0
        self.swing_pos = -np.asarray(foothold, dtype=float)
        self.swing_vel = np.zeros(2)
        self.sigma = self.sigma.flipped()
        self.t_step = 0.0
        self.plan_index = 0
        self.steps_taken += 1
        if self.env_cfg.resample_every and self.steps_taken % self.env_cfg.resample_every == 0:
            self.gait = self.sampler.sample(self.rng, p.T_s)
        self._maybe_schedule_training_push()
        logger.debug("impact %d: L_y error %.4f", self.steps_taken, info["Ly_err_end"])

    # ------------------------------------------------------------- observation

    def _observe(self):
        """(clean, noisy) observations in the torso heading frame."""
        p, proxy = self.params, self.proxy
        xh = rotate_state(self.x, -self.torso_yaw)
        phase = self.t_step / p.T_s
        reach = self.env_cfg.leg_length ** 2 - self.x[0] ** 2 - self.x[1] ** 2
        z_c = min(p.z_H + proxy.zc_ripple_amp * math.cos(2 * math.pi * phase), math.sqrt(max(reach, 0.0)))
        L_z = p.m * (p.W / 2) ** 2 * self.gait.yaw_rate_des
        alpha = np.array([xh[0], xh[1], z_c, xh[2], xh[3], L_z])
        swing_pitch = proxy.slope * math.cos(self.torso_yaw)
        psi = np.array([
            self.tilt[0], self.tilt[1], wrap_angle(self.torso_yaw - self.stance_yaw),
            0.0, swing_pitch, wrap_angle(self.swing_yaw - self.torso_yaw),
            self.tilt_rate[0], self.tilt_rate[1], self.gait.yaw_rate_des,
        ])
        prev = self.prev_total.copy()
        T_r = self.T_r
        clean = Observation(int(self.sigma), T_r, alpha, psi, self.gait.beta(), prev)

        std = proxy.obs_noise_std
        if std > 0:
            noise_x = self.rng.normal(0.0, std, 4)
            self._measured = self.x + noise_x
            noisy = Observation(int(self.sigma), T_r,
                                alpha + np.concatenate([rotate_state(noise_x, -self.torso_yaw)[:2],
                                                        self.rng.normal(0.0, std, 1),
                                                        rotate_state(noise_x, -self.torso_yaw)[2:],
                                                        self.rng.normal(0.0, std, 1)]),
                                psi + self.rng.normal(0.0, std, 9), self.gait.beta(), prev)
        else:
            self._measured = self.x.copy()
            noisy = clean
        return clean, noisy

    # ----------------------------------------------------------------- logging

    def _log_row(self, base_rel, a, total, r, terminated):
        c = self._clean
        self.trajectory.append({
            "t": self.t, "sigma": c.sigma, "T_r": self.T_r,
            "x_c": c.alpha[0], "y_c": c.alpha[1], "z_c": c.alpha[2],
            "L_x": c.alpha[3], "L_y": c.alpha[4], "L_z": c.alpha[5],
            "u_x_base": base_rel[0], "u_y_base": base_rel[1],
            "u_x_res": a.u_res[0], "u_y_res": a.u_res[1],
            "gamma_total": total[2], "reward": r, "terminated": int(terminated),
        })

    def trajectory_frame(self):
        return pd.DataFrame(self.trajectory, columns=TRAJECTORY_COLUMNS)

    def write_trajectory_csv(self, path, meta=None):
        write_csv(path, self.trajectory_frame(), meta)
