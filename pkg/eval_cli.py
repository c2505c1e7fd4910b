"""Command line entry point: `python eval_cli.py <command> --config <path> ...`.

Commands reproduce desk-scale walking experiments on the proxy simulator and write
CSV files (with `# config_hash=...` header lines) into --out.
"""
import argparse
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from sklearn.metrics import auc

import config
import policy_net
from alip_core import GaitCommand, StanceSign, periodic_orbit
from errors import AlipStepperError, ConfigError
from gait_env import PUSH_TYPES, Action, GaitEnv, GaitSampler
from ppo_trainer import evaluate_policy, train
from utils import write_csv

logger = logging.getLogger(__name__)

COMMANDS = ("orbit", "train", "track", "push", "turn", "slope", "compare")


@dataclass
class Controller:
    name: str
    base_policy: str
    policy: Optional[policy_net.MlpPolicy] = None

    def act(self, obs):
        if self.policy is None:
            return np.zeros(3)
        return self.policy.forward(obs.as_vector())


class Session:
    """Typed sections of one settings file plus the metadata stamped on every CSV."""

    def __init__(self, settings, out_dir, config_path=None):
        self.settings = settings
        self.out = Path(out_dir)
        self.config_path = config_path
        self.params = config.alip_params(settings)
        self.mpc_cfg = config.mpc_config(settings)
        self.proxy = config.proxy_params(settings)
        self.env_cfg = config.env_config(settings)
        self.reward_cfg = config.reward_config(settings, self.params)
        self.sampler = config.gait_sampler(settings, self.params)
        self.hash = config.settings_hash(settings)

    def get(self, key):
        return config.get_setting(self.settings, key)

    def meta(self, **extra):
        return {"config_hash": self.hash, **extra}

    def controllers(self, spec: config.ExperimentSpec):
        """mpc-only -> [MPC]; checkpoint -> [MPC, MPC+RL]; rl-only -> [RL-only]."""
        if spec.controller == "mpc-only":
            return [Controller("MPC", "mpc")]
        policy = policy_net.load(spec.checkpoint)
        if policy.kind != policy_net.KIND_POLICY:
            raise ConfigError(f"{spec.checkpoint} is not a policy checkpoint")
        if policy.normalizer is not None:
            policy.normalizer.frozen = True
        if spec.controller == "rl-only":
            return [Controller("RL-only", "nominal", policy)]
        return [Controller("MPC", "mpc"), Controller("MPC+RL", "mpc", policy)]

    def make_env(self, controller: Controller, proxy=None, **env_overrides):
        env_cfg = dataclasses.replace(self.env_cfg, base_policy=controller.base_policy, push_prob=0.0,
                                      resample_every=0, **env_overrides)
        mpc_cfg = self.mpc_cfg if controller.base_policy == "mpc" else None
        return GaitEnv(self.params, mpc_cfg, proxy or self.proxy, env_cfg, self.reward_cfg, self.sampler)


# ----------------------------------------------------------------------- orbit

def cmd_orbit(session: Session, args):
    p = session.params
    gait = GaitCommand(L_x_offset=-p.mzh * session.get("orbit.vy"), L_y_des=p.mzh * session.get("orbit.vx"), T_s=p.T_s)
    lines = []
    for sigma in (StanceSign.LEFT, StanceSign.RIGHT):
        orbit = periodic_orbit(p, gait, sigma)
        x = orbit.x_des
        lines += [
            f"stance {sigma.name.lower()} (sigma={int(sigma):+d})",
            f"  L_x_main         = {orbit.lx_main:.12g}",
            f"  x_des            = [{x.x_c:.12g}, {x.y_c:.12g}, {x.L_x:.12g}, {x.L_y:.12g}]",
            f"  foothold         = [{orbit.foothold[0]:.12g}, {orbit.foothold[1]:.12g}]",
            f"  closure_residual = {orbit.closure_residual:.3e}",
        ]
    report = "\n".join(lines)
    print(report)
    return report


# ----------------------------------------------------------------------- train

def cmd_train(session: Session, args):
    cfg = config.ppo_config(session.settings)
    result = train(cfg, session.env_cfg, session.mpc_cfg, session.reward_cfg, session.out,
                   resume=args.resume, params=session.params, proxy=session.proxy,
                   gait_sampler=session.sampler, meta=session.meta(command="train"))
    logger.info("policy written to %s, metrics to %s", result.policy_path, result.metrics_path)

    # deterministic before/after comparison on the training proxy
    policy = policy_net.load(result.policy_path)
    policy.normalizer.frozen = True
    seeds = [int(s) for s in session.get("experiment.seeds")]
    base = session.env_cfg.base_policy
    name = "MPC+RL" if base == "mpc" else "RL-only"
    frames = []
    for controller in (Controller("base", base), Controller(name, base, policy)):
        frame = evaluate_policy(session.make_env(controller), controller.policy, seeds)
        frame.insert(0, "controller", controller.name)
        frames.append(frame)
    evaluation = pd.concat(frames, ignore_index=True)
    write_csv(session.out / "eval.csv", evaluation, session.meta(command="train"))
    summary = evaluation.groupby("controller")["mean_Ly_err"].mean()
    logger.info("mean end-of-step |L_y error|: %s", summary.to_dict())
    return result


# ----------------------------------------------------------------------- track

def profile_value(profile, t):
    """Piecewise-constant profile lookup; profile is a sorted sequence of (t_i, v_i)."""
    value = profile[0][1]
    for t_i, v_i in profile:
        if t_i <= t + 1e-12:
            value = v_i
    return value


def track_run(session: Session, controller: Controller, profile, duration, seed, proxy=None):
    """Velocity-tracking rollout; returns a frame indexed by time with (v_cmd, v_meas)."""
    p = session.params
    max_steps = math.ceil(duration / p.T_s) + 1
    env = session.make_env(controller, proxy, max_steps=max_steps)
    gait = GaitCommand(L_y_des=p.mzh * profile_value(profile, 0.0), T_s=p.T_s)
    obs = env.reset_episode(seed=seed, gait_sampler=GaitSampler.fixed(gait))
    rows = []
    while env.t < duration - 1e-9:
        v_cmd = profile_value(profile, env.t)
        if v_cmd * p.mzh != env.gait.L_y_des:
            env.set_command(dataclasses.replace(env.gait, L_y_des=v_cmd * p.mzh))
            obs = env.observation
        out = env.env_step(Action.from_vector(controller.act(obs)))
        obs = out.obs_next
        rows.append({"t": round(env.t, 9), "v_cmd": v_cmd,
                     f"v_meas_{controller.name}": env.true_observation.alpha[4] / p.mzh})
        if out.terminated or out.truncated:
            if out.terminated:
                logger.warning("%s fell at t=%.3f", controller.name, env.t)
            break
    return pd.DataFrame(rows).set_index("t")


def track_frame(session: Session, controllers, seed, proxy=None):
    profile = sorted(session.get("track.profile"))
    duration = session.get("track.duration")
    frames = [track_run(session, c, profile, duration, seed, proxy) for c in controllers]
    frame = frames[0]
    for other in frames[1:]:
        frame = frame.combine_first(other)
    cols = ["v_cmd"] + [f"v_meas_{c.name}" for c in controllers]
    return frame[cols].reset_index()


def cmd_track(session: Session, args):
    spec = config.experiment_spec(session.settings, session.config_path)
    frame = track_frame(session, session.controllers(spec), spec.seeds[0])
    path = session.out / "track.csv"
    write_csv(path, frame, session.meta(command="track", seed=spec.seeds[0]))
    logger.info("wrote %s", path)
    return frame


def cmd_slope(session: Session, args):
    spec = config.experiment_spec(session.settings, session.config_path)
    controllers = session.controllers(spec)
    frames = {}
    for slope in session.get("slope.values"):
        proxy = dataclasses.replace(session.proxy, slope=float(slope))
        frame = track_frame(session, controllers, spec.seeds[0], proxy)
        path = session.out / f"slope_{math.degrees(slope):.1f}.csv"
        write_csv(path, frame, session.meta(command="slope", slope=slope, seed=spec.seeds[0]))
        logger.info("slope %.4f rad -> %s", slope, path)
        frames[float(slope)] = frame
    return frames


# ------------------------------------------------------------------------ push

def _walk(env, controller, obs, until_steps):
    """Step until env.steps_taken reaches until_steps; False if the episode terminated."""
    while env.steps_taken < until_steps:
        out = env.env_step(Action.from_vector(controller.act(obs)))
        obs = out.obs_next
        if out.terminated:
            return False, obs
        if out.truncated:
            break
    return True, obs


def survives_push(session: Session, controller, force, duration, direction, seed):
    """Independent protocol: fresh episode, warm-up, one push, then survive_steps steps."""
    p = session.params
    warmup = session.get("push.warmup_steps")
    survive = session.get("push.survive_steps")
    push_steps = math.ceil(duration / p.T_s)
    env = session.make_env(controller, max_steps=warmup + push_steps + survive + 1)
    obs = env.reset_episode(seed=seed)
    ok, obs = _walk(env, controller, obs, warmup)
    if not ok:
        return False
    env.apply_push(force, duration, direction, env.t)
    ok, _ = _walk(env, controller, obs, warmup + push_steps + survive)
    return ok


def max_force_bisect(session: Session, controller, duration, direction, seed):
    lo, hi = 0.0, session.get("push.max_force")
    if survives_push(session, controller, hi, duration, direction, seed):
        return hi
    for _ in range(session.get("push.bisect_iters")):
        mid = 0.5 * (lo + hi)
        if survives_push(session, controller, mid, duration, direction, seed):
            lo = mid
        else:
            hi = mid
    return lo


def max_force_sequential(session: Session, controller, duration, direction, seed):
    """Increasing pushes within one episode until the robot falls; last force survived."""
    p = session.params
    warmup = session.get("push.warmup_steps")
    survive = session.get("push.survive_steps")
    step_force = session.get("push.force_step")
    max_force = session.get("push.max_force")
    n_pushes = int(max_force // step_force)
    recover = math.ceil(duration / p.T_s) + survive
    env = session.make_env(controller, max_steps=warmup + n_pushes * recover + 1)
    obs = env.reset_episode(seed=seed)
    ok, obs = _walk(env, controller, obs, warmup)
    survived = 0.0
    for k in range(1, n_pushes + 1):
        if not ok:
            break
        force = k * step_force
        env.apply_push(force, duration, direction, env.t)
        ok, obs = _walk(env, controller, obs, env.steps_taken + recover)
        if ok:
            survived = force
    return survived


def cmd_push(session: Session, args):
    spec = config.experiment_spec(session.settings, session.config_path)
    protocol = session.get("push.protocol")
    if protocol not in ("independent", "sequential"):
        raise ConfigError(f"push.protocol must be 'independent' or 'sequential', got {protocol!r}")
    search = max_force_bisect if protocol == "independent" else max_force_sequential
    n_dir = session.get("push.directions")
    weight = session.params.m * session.params.g
    rows = []
    for controller in session.controllers(spec):
        for kind in session.get("push.types"):
            if kind not in PUSH_TYPES:
                raise ConfigError(f"unknown push type {kind!r}; choose from {sorted(PUSH_TYPES)}")
            duration = PUSH_TYPES[kind][1]
            for k in range(n_dir):
                direction = 2.0 * math.pi * k / n_dir
                force = search(session, controller, duration, direction, spec.seeds[0])
                rows.append({"controller": controller.name, "push_type": kind, "direction": direction,
                             "max_force_normalized": force / weight})
                logger.info("%s %s push at %.2f rad: %.1f N", controller.name, kind, direction, force)
    frame = pd.DataFrame(rows, columns=["controller", "push_type", "direction", "max_force_normalized"])
    write_csv(session.out / "push.csv", frame, session.meta(command="push", protocol=protocol))
    return frame


# ------------------------------------------------------------------------ turn

def cmd_turn(session: Session, args):
    spec = config.experiment_spec(session.settings, session.config_path)
    p = session.params
    yaw_rate = session.get("turn.yaw_rate")
    max_steps = session.get("turn.max_steps")
    sampler = GaitSampler.fixed(GaitCommand(yaw_rate_des=yaw_rate, T_s=p.T_s))
    rows = []
    for controller in session.controllers(spec):
        for seed in spec.seeds:
            env = session.make_env(controller, max_steps=max_steps)
            obs = env.reset_episode(seed=seed, gait_sampler=sampler)
            yaw0 = env.stance_yaw
            _walk(env, controller, obs, max_steps)
            steps = max(env.steps_taken, 1)
            measured = (env.stance_yaw - yaw0) / (steps * p.T_s)
            rows.append({"controller": controller.name, "seed": seed,
                         "completed_turns": int(abs(env.torso_yaw) // (2.0 * math.pi)),
                         "yaw_rate_error": abs(measured - yaw_rate)})
    frame = pd.DataFrame(rows, columns=["controller", "seed", "completed_turns", "yaw_rate_error"])
    write_csv(session.out / "turn.csv", frame, session.meta(command="turn", yaw_rate=yaw_rate))
    return frame


# --------------------------------------------------------------------- compare

def learning_curve_auc(frame):
    curve = frame.dropna(subset=["mean_return"])
    if len(curve) < 2:
        return float(curve["mean_return"].sum())
    return float(auc(curve["env_steps"], curve["mean_return"]))


def cmd_compare(session: Session, args):
    """Train MPC+RL and RL-only from identical seeds and budgets; compare learning curves."""
    spec_seeds = tuple(int(s) for s in session.get("experiment.seeds"))
    if not spec_seeds:
        raise ConfigError("experiment.seeds must not be empty")
    base_cfg = config.ppo_config(session.settings)
    rows, meta, wins = [], session.meta(command="compare"), 0
    for seed in spec_seeds:
        curves = {}
        for variant, base in (("mpc_rl", "mpc"), ("rl_only", "nominal")):
            env_cfg = dataclasses.replace(session.env_cfg, base_policy=base)
            result = train(dataclasses.replace(base_cfg, seed=seed), env_cfg,
                           session.mpc_cfg if base == "mpc" else None, session.reward_cfg,
                           session.out / f"{variant}_seed{seed}", params=session.params, proxy=session.proxy,
                           gait_sampler=session.sampler, meta=meta, progress=False)
            curves[variant] = result.metrics
        a, b = curves["mpc_rl"], curves["rl_only"]
        for (_, ra), (_, rb) in zip(a.iterrows(), b.iterrows()):
            rows.append({"seed": seed, "iter": int(ra["iter"]), "env_steps": int(ra["env_steps"]),
                         "mean_return_mpc_rl": ra["mean_return"], "mean_return_rl_only": rb["mean_return"]})
        auc_a, auc_b = learning_curve_auc(a), learning_curve_auc(b)
        meta[f"auc_mpc_rl_seed{seed}"] = auc_a
        meta[f"auc_rl_only_seed{seed}"] = auc_b
        wins += auc_a > auc_b
    meta["auc_mpc_rl_wins"] = f"{wins}/{len(spec_seeds)}"
    frame = pd.DataFrame(rows, columns=["seed", "iter", "env_steps", "mean_return_mpc_rl", "mean_return_rl_only"])
    write_csv(session.out / "compare.csv", frame, meta)
    return frame


HANDLERS = {
    "orbit": cmd_orbit,
    "train": cmd_train,
    "track": cmd_track,
    "push": cmd_push,
    "turn": cmd_turn,
    "slope": cmd_slope,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="alip-stepper", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value settings file (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="overrides experiment.seeds and ppo.seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--resume", action="store_true", help="train: continue from trainer_state.npz")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        settings = config.load_settings(args.config) if args.config else {}
        if args.seed is not None:
            config.set_setting(settings, "experiment.seeds", (args.seed,))
            config.set_setting(settings, "ppo.seed", args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        session = Session(settings, out, args.config)
        HANDLERS[args.command](session, args)
    except AlipStepperError as e:
        logger.error("%s failed: %s", args.command, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
