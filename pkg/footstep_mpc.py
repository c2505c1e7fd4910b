"""ALIP MPC footstep planner (the base policy of the residual MDP).

The horizon covers N_s steps of fixed duration T_s. Intermediate samples carry no cost,
so states are condensed to the step transitions through exp(A*T_s) and the problem
becomes a dense QP in the footholds plus slacks on the kinematic box.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from alip_core import (
    B_FOOTHOLD,
    AlipParams,
    AlipState,
    GaitCommand,
    StanceSign,
    alip_transition,
    foot_yaw_command,
    periodic_orbit,
    predict_preimpact,
    reference_states,
)
from errors import DimensionMismatch, InvalidParams, SolverFailure
from qp_solver import QpProblem, QpStatus, solve_qp
from utils import validate_finite, validate_positive

logger = logging.getLogger(__name__)


@dataclass
class MpcConfig:
    N_s: int = 3
    q_weight: float = 1.0
    qf_factor: float = 10.0
    Q: Optional[np.ndarray] = None
    Q_f: Optional[np.ndarray] = None
    kin_box: tuple = (0.35, 0.35)
    mu_friction: float = 0.7
    u_bounds: tuple = (0.5, 0.6)
    min_width: float = 0.05
    slack_penalty: float = 1e6
    tol: float = 1e-8
    max_iter: int = 4000

    def __post_init__(self):
        if int(self.N_s) != self.N_s or self.N_s < 1:
            raise InvalidParams(f"N_s must be an integer >= 1, got {self.N_s!r}")
        self.N_s = int(self.N_s)
        if self.Q is None:
            self.Q = np.diag([0.0, 0.0, 1.0, 1.0]) * self.q_weight
        if self.Q_f is None:
            self.Q_f = self.qf_factor * np.asarray(self.Q, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.Q_f = np.asarray(self.Q_f, dtype=float)
        for name in ("Q", "Q_f"):
            mat = getattr(self, name)
            if mat.shape != (4, 4) or np.min(np.linalg.eigvalsh((mat + mat.T) / 2)) < -1e-12:
                raise InvalidParams(f"{name} must be a 4x4 PSD matrix")
        self.kin_box = tuple(float(v) for v in self.kin_box)
        self.u_bounds = tuple(float(v) for v in self.u_bounds)
        for v in self.kin_box + self.u_bounds:
            validate_positive("kin_box/u_bounds", v)
        validate_positive("mu_friction", self.mu_friction)
        validate_positive("slack_penalty", self.slack_penalty)
        if not 0.0 <= self.min_width < self.u_bounds[1]:
            raise InvalidParams("min_width must be in [0, u_bounds[1])")


@dataclass
class FootstepPlan:
    u_seq: np.ndarray
    gamma0: float
    predicted_states: list = field(default_factory=list)
    objective: float = 0.0
    slack_norm: float = 0.0

    @property
    def u0(self):
        return self.u_seq[0]


def _condense(x0, N_s, params):
    """Transition states x_end[i] = Sx[i] x0 + Su[i] U for i = 0..N_s."""
    Phi = alip_transition(params, params.T_s)
    PhiB = Phi @ B_FOOTHOLD
    nu = 2 * N_s
    Sx = [np.eye(4)]
    Su = [np.zeros((4, nu))]
    for i in range(1, N_s + 1):
        Sx.append(Phi @ Sx[-1])
        nxt = Phi @ Su[-1]
        nxt[:, 2 * (i - 1):2 * i] += PhiB
        Su.append(nxt)
    return Sx, Su


def stance_signs(sigma, N_s):
    """Stance sign of each step in the horizon, starting with the current one."""
    return [int(sigma) * (-1) ** i for i in range(N_s)]


def build_qp(x0, refs, cfg: MpcConfig, sigma, params: AlipParams) -> QpProblem:
    """Condensed QP in z = [u_0, ..., u_{N_s-1}, s_0, ..., s_{N_s-1}].

    Slack cost is slack_penalty*(|s|^2 + sum(s)). The linear term makes the penalty exact:
    slacks stay at zero whenever the hard-constrained problem is feasible and
    slack_penalty exceeds its kinematic-box multipliers.
    """
    x0 = x0.as_array() if isinstance(x0, AlipState) else np.asarray(x0, dtype=float)
    if x0.shape != (4,):
        raise DimensionMismatch(f"x0 must have 4 entries, got {x0.shape}")
    validate_finite("x0", x0)
    N_s = cfg.N_s
    if len(refs) != N_s:
        raise DimensionMismatch(f"expected {N_s} references, got {len(refs)}")
    R = [r.as_array() if isinstance(r, AlipState) else np.asarray(r, dtype=float) for r in refs]
    nu = 2 * N_s
    n = 2 * nu
    Sx, Su = _condense(x0, N_s, params)

    H = np.zeros((n, n))
    f = np.zeros(n)
    for i in range(1, N_s + 1):
        W = cfg.Q_f if i == N_s else cfg.Q
        err0 = Sx[i] @ x0 - R[i - 1]
        H[:nu, :nu] += 2.0 * Su[i].T @ W @ Su[i]
        f[:nu] += 2.0 * Su[i].T @ W @ err0
    H[nu:, nu:] = 2.0 * cfg.slack_penalty * np.eye(nu)
    f[nu:] = cfg.slack_penalty
    H = 0.5 * (H + H.T)

    rows, rhs = [], []

    def add(row, bound):
        rows.append(row)
        rhs.append(bound)

    reach = 2.0 * cfg.mu_friction * params.z_H
    for i, sig in enumerate(stance_signs(sigma, N_s)):
        for axis in (0, 1):
            u_col = 2 * i + axis
            s_col = nu + 2 * i + axis
            # kinematic box on the post-impact CoM offset p_i - u_i, softened
            post = np.zeros(n)
            post[:nu] = Su[i][axis]
            post[u_col] -= 1.0
            offset = Sx[i][axis] @ x0
            row = post.copy()
            row[s_col] = -1.0
            add(row, cfg.kin_box[axis] - offset)
            row = -post
            row[s_col] = -1.0
            add(row, cfg.kin_box[axis] + offset)
            row = np.zeros(n)
            row[s_col] = -1.0
            add(row, 0.0)
            # friction proxy
            for sign in (1.0, -1.0):
                row = np.zeros(n)
                row[u_col] = sign
                add(row, reach)
        # foothold safety box; the lateral side is gated by the stance sign
        for sign in (1.0, -1.0):
            row = np.zeros(n)
            row[2 * i] = sign
            add(row, cfg.u_bounds[0])
        row = np.zeros(n)
        row[2 * i + 1] = sig
        add(row, -cfg.min_width)
        row = np.zeros(n)
        row[2 * i + 1] = -sig
        add(row, cfg.u_bounds[1])

    return QpProblem(H=H, f=f, A_in=np.array(rows), b_in=np.array(rhs))


def _propagate(x0, U, params):
    Phi = alip_transition(params, params.T_s)
    states = []
    x = x0
    for u in U:
        x = Phi @ (x + B_FOOTHOLD @ u)
        states.append(AlipState.from_array(x))
    return states


def _tracking_cost(states, refs, cfg):
    cost = 0.0
    for i, (x, r) in enumerate(zip(states, refs), start=1):
        W = cfg.Q_f if i == cfg.N_s else cfg.Q
        e = x.as_array() - r.as_array()
        cost += float(e @ W @ e)
    return cost


def plan(x_cm, T_r, gait: GaitCommand, sigma, torso_yaw, foot_yaw,
         cfg: MpcConfig, params: AlipParams) -> FootstepPlan:
    """Solve the MPC from the current measurement; footholds are in the torso heading frame."""
    sigma = StanceSign(int(sigma))
    x0 = predict_preimpact(x_cm, T_r, torso_yaw, params)
    x0 = x0.as_array() if isinstance(x0, AlipState) else x0
    refs = reference_states(params, gait, sigma, cfg.N_s)
    qp = build_qp(x0, refs, cfg, sigma, params)
    sol = solve_qp(qp, cfg.tol, cfg.max_iter)
    if sol.status is not QpStatus.OPTIMAL:
        raise SolverFailure(f"footstep QP ended with {sol.status.value}, "
                            f"worst KKT residual {sol.kkt.worst():.3g}", sol)
    nu = 2 * cfg.N_s
    U = sol.z[:nu].reshape(cfg.N_s, 2)
    slacks = np.where(sol.z[nu:] > cfg.tol, sol.z[nu:], 0.0)
    slack_norm = float(np.linalg.norm(slacks))
    if slack_norm > 0:
        logger.debug("kinematic box softened, slack norm %.3g", slack_norm)
    states = _propagate(x0, U, params)
    objective = _tracking_cost(states, refs, cfg) + cfg.slack_penalty * float(slacks @ slacks + slacks.sum())
    gamma0 = foot_yaw_command(gait.yaw_rate_des, params.T_s, foot_yaw)
    return FootstepPlan(U, gamma0, states, objective, slack_norm)


def nominal_plan(gait: GaitCommand, sigma, foot_yaw, N_s, params: AlipParams) -> FootstepPlan:
    """Orbit footholds with no feedback; the base action of the RL-only variant."""
    U = np.array([periodic_orbit(params, gait, s).foothold for s in stance_signs(sigma, N_s)])
    gamma0 = foot_yaw_command(gait.yaw_rate_des, params.T_s, foot_yaw)
    return FootstepPlan(U, gamma0)


def replan_schedule(f_plan, T_s):
    """Replan instants within one step at period 1/f_plan, always including t = 0."""
    validate_positive("f_plan", f_plan)
    validate_positive("T_s", T_s)
    count = max(1, math.ceil(f_plan * T_s - 1e-9))
    return np.arange(count) / f_plan
