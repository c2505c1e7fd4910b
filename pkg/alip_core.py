"""ALIP model: continuous dynamics, exact discretisation, period-2 orbit references,
pre-impact prediction and the one-step-ahead foot yaw command.

State ordering is (x_c, y_c, L_x, L_y): CoM position relative to the stance contact
and angular momentum about the contact point.
"""
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import expm

from errors import InvalidParams, NoOrbit
from utils import rot2, validate_finite, validate_positive, wrap_angle

logger = logging.getLogger(__name__)

B_FOOTHOLD = np.array([[-1.0, 0.0], [0.0, -1.0], [0.0, 0.0], [0.0, 0.0]])
ORBIT_MAX_COND = 1e12


@dataclass(frozen=True)
class AlipParams:
    m: float = 39.0
    g: float = 9.81
    z_H: float = 0.69
    T_s: float = 0.25
    dt: float = 0.0125
    W: float = 0.25

    def __post_init__(self):
        for name in ("m", "g", "z_H", "T_s", "dt", "W"):
            validate_positive(name, getattr(self, name))
        ratio = self.T_s / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise InvalidParams(f"T_s/dt must be an integer, got {ratio!r}")

    @property
    def N_dt(self):
        return int(round(self.T_s / self.dt))

    @property
    def lam(self):
        return math.sqrt(self.g / self.z_H)

    @property
    def mzh(self):
        return self.m * self.z_H


@dataclass(frozen=True)
class AlipState:
    x_c: float = 0.0
    y_c: float = 0.0
    L_x: float = 0.0
    L_y: float = 0.0

    def __post_init__(self):
        validate_finite("AlipState", self.as_array())

    def as_array(self):
        return np.array([self.x_c, self.y_c, self.L_x, self.L_y], dtype=float)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float).reshape(4)
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class GaitCommand:
    """Desired end-of-step targets; gamma_des is derived from the yaw rate."""

    L_x_offset: float = 0.0
    L_y_des: float = 0.0
    yaw_rate_des: float = 0.0
    T_s: float = 0.25

    def __post_init__(self):
        validate_finite("GaitCommand", [self.L_x_offset, self.L_y_des, self.yaw_rate_des])
        validate_positive("T_s", self.T_s)

    @property
    def gamma_des(self):
        return self.yaw_rate_des * self.T_s

    def beta(self):
        return np.array([self.L_x_offset, self.L_y_des, self.gamma_des])


class StanceSign(IntEnum):
    LEFT = 1
    RIGHT = -1

    def flipped(self):
        return StanceSign(-int(self))


class PeriodicOrbit(NamedTuple):
    lx_main: float
    x_des: AlipState
    foothold: np.ndarray
    closure_residual: float


def _as_array(x):
    return x.as_array() if isinstance(x, AlipState) else np.asarray(x, dtype=float)


def system_matrices(params: AlipParams):
    """Continuous ALIP matrices (A, B)."""
    inv_mzh = 1.0 / (params.m * params.z_H)
    mg = params.m * params.g
    A = np.zeros((4, 4))
    A[0, 3] = inv_mzh
    A[1, 2] = -inv_mzh
    A[2, 1] = -mg
    A[3, 0] = mg
    return A, B_FOOTHOLD.copy()


def discretize(A, dt):
    """exp(A*dt) by scaling-and-squaring Pade."""
    if dt < 0:
        raise InvalidParams(f"dt must be >= 0, got {dt!r}")
    return expm(np.asarray(A, dtype=float) * dt)


def alip_transition(params: AlipParams, dt):
    """Closed-form exp(A*dt) for the ALIP A; the two planar pairs never mix."""
    lam = params.lam
    k = params.m * params.z_H * lam
    c, s = math.cosh(lam * dt), math.sinh(lam * dt)
    Phi = np.zeros((4, 4))
    # (x_c, L_y)
    Phi[0, 0] = c
    Phi[0, 3] = s / k
    Phi[3, 0] = k * s
    Phi[3, 3] = c
    # (y_c, L_x)
    Phi[1, 1] = c
    Phi[1, 2] = -s / k
    Phi[2, 1] = -k * s
    Phi[2, 2] = c
    return Phi


def step_map(x, u_fp: Optional[np.ndarray], params: AlipParams):
    """One sample of the discrete dynamics; u_fp is applied on transition samples only."""
    xa = _as_array(x)
    if u_fp is not None:
        xa = xa + B_FOOTHOLD @ np.asarray(u_fp, dtype=float)
    out = alip_transition(params, params.dt) @ xa
    return AlipState.from_array(out) if isinstance(x, AlipState) else out


def nominal_lateral_foothold(params: AlipParams, sigma):
    """Lateral landing offset of the swing foot during a step with stance sigma."""
    return -int(sigma) * params.W


def _two_step_closure(params, L_y_des, sigma, unknowns):
    """Residual of the two-step map for unknowns (x_c, y_c, L_x, u_x)."""
    Phi = alip_transition(params, params.T_s)
    x_c, y_c, L_x, u_x = unknowns
    z = np.array([x_c, y_c, L_x, L_y_des])
    u1 = np.array([u_x, nominal_lateral_foothold(params, sigma)])
    u2 = np.array([u_x, nominal_lateral_foothold(params, -int(sigma))])
    mid = Phi @ (z + B_FOOTHOLD @ u1)
    back = Phi @ (mid + B_FOOTHOLD @ u2)
    return back - z


def periodic_orbit(params: AlipParams, gait: GaitCommand, sigma) -> PeriodicOrbit:
    """Period-2 orbit of the step-to-step map.

    x_des is the state at the end of a step with stance sigma; the step ends with the
    nominal foothold (u_x, -sigma*W). L_y is pinned to gait.L_y_des, so the closure is
    affine in (x_c, y_c, L_x, u_x) and solved directly.
    """
    sigma = StanceSign(int(sigma))
    r0 = _two_step_closure(params, gait.L_y_des, sigma, np.zeros(4))
    M = np.empty((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1.0
        M[:, i] = _two_step_closure(params, gait.L_y_des, sigma, e) - r0
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > ORBIT_MAX_COND:
        raise NoOrbit(f"two-step closure is singular (cond={cond:.3g}) for T_s={params.T_s}")
    sol = np.linalg.solve(M, -r0)
    residual = float(np.max(np.abs(_two_step_closure(params, gait.L_y_des, sigma, sol))))
    x_des = AlipState(sol[0], sol[1], sol[2], gait.L_y_des)
    foothold = np.array([sol[3], nominal_lateral_foothold(params, sigma)])
    return PeriodicOrbit(float(sol[2]), x_des, foothold, residual)


def orbit_start_state(params: AlipParams, gait: GaitCommand, sigma) -> AlipState:
    """Post-impact state at the start of a step with stance sigma, on the orbit."""
    prev = periodic_orbit(params, gait, -int(sigma))
    return AlipState.from_array(prev.x_des.as_array() + B_FOOTHOLD @ prev.foothold)


def reference_states(params: AlipParams, gait: GaitCommand, sigma_initial, N_s):
    """Desired states at the N_s upcoming step transitions.

    Transition i (1-based) ends the step whose stance is sigma_initial*(-1)^i.
    """
    if N_s < 1:
        raise InvalidParams(f"N_s must be >= 1, got {N_s!r}")
    refs = []
    sigma = StanceSign(int(sigma_initial))
    for _ in range(N_s):
        sigma = sigma.flipped()
        orbit = periodic_orbit(params, gait, sigma)
        x = orbit.x_des
        refs.append(AlipState(x.x_c, x.y_c, orbit.lx_main + gait.L_x_offset, gait.L_y_des))
    return refs


def rotate_state(x, yaw):
    """Rotate the position pair and the momentum pair of a state by yaw about z."""
    xa = _as_array(x)
    R = rot2(yaw)
    out = np.concatenate([R @ xa[0:2], R @ xa[2:4]])
    return AlipState.from_array(out) if isinstance(x, AlipState) else out


def predict_preimpact(x_cm, T_r, torso_yaw_des, params: AlipParams):
    """exp(A*T_r) R_MPC^T x_cm: the predicted state just before the next impact."""
    if not (0.0 <= T_r <= params.T_s + 1e-12):
        raise InvalidParams(f"T_r must be in [0, T_s], got {T_r!r}")
    local = rotate_state(_as_array(x_cm), -torso_yaw_des)
    out = alip_transition(params, T_r) @ local
    return AlipState.from_array(out) if isinstance(x_cm, AlipState) else out


def foot_yaw_command(yaw_rate_des, T_s, current_foot_yaw):
    """One-step-ahead foot yaw, wrapped to (-pi, pi]."""
    return wrap_angle(current_foot_yaw + yaw_rate_des * T_s)
