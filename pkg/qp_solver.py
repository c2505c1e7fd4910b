"""Dense convex QP solver.

    minimize    1/2 z^T H z + f^T z
    subject to  A_eq z  = b_eq
                A_in z <= b_in

Dual active-set method: start from the equality-constrained minimiser and add the most
violated inequality, taking primal/dual steps on the working-set KKT system until all
inequalities hold. PSD Hessians are handled with a proximal-point outer loop.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor
from scipy.linalg import solve as linear_solve

from errors import DimensionMismatch

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 4000


class QpStatus(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass
class KktResiduals:
    stationarity: float
    primal_eq: float
    primal_in: float
    dual: float
    complementarity: float

    def worst(self):
        return max(self.stationarity, self.primal_eq, self.primal_in, self.dual, self.complementarity)


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        n = self.f.size
        if self.H.shape != (n, n):
            raise DimensionMismatch(f"H is {self.H.shape}, expected {(n, n)}")
        scale = max(1.0, float(np.max(np.abs(self.H)))) if n else 1.0
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12 * scale:
            raise DimensionMismatch("H is not symmetric")
        self.A_eq, self.b_eq = self._rows(self.A_eq, self.b_eq, n, "eq")
        self.A_in, self.b_in = self._rows(self.A_in, self.b_in, n, "in")

    @staticmethod
    def _rows(A, b, n, tag):
        if A is None:
            return np.zeros((0, n)), np.zeros(0)
        A = np.asarray(A, dtype=float).reshape(-1, n) if np.size(A) else np.zeros((0, n))
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.shape[0] != b.size:
            raise DimensionMismatch(f"A_{tag} has {A.shape[0]} rows but b_{tag} has {b.size}")
        return A, b

    @property
    def n(self):
        return self.f.size

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * z @ self.H @ z + self.f @ z


@dataclass
class QpSolution:
    z: np.ndarray
    lambda_eq: np.ndarray
    mu_in: np.ndarray
    status: QpStatus
    kkt: Optional[KktResiduals] = None
    iterations: int = 0
    active_set: list = field(default_factory=list)


def check_kkt(p: QpProblem, s: QpSolution) -> KktResiduals:
    """Recompute the KKT residual norms of a candidate solution from scratch."""
    z, lam, mu = s.z, s.lambda_eq, s.mu_in
    if z.size != p.n or lam.size != p.A_eq.shape[0] or mu.size != p.A_in.shape[0]:
        raise DimensionMismatch("solution does not match problem dimensions")
    grad = p.H @ z + p.f + p.A_eq.T @ lam + p.A_in.T @ mu
    slack = p.A_in @ z - p.b_in
    return KktResiduals(
        stationarity=float(np.max(np.abs(grad), initial=0.0)),
        primal_eq=float(np.max(np.abs(p.A_eq @ z - p.b_eq), initial=0.0)),
        primal_in=max(0.0, float(np.max(slack, initial=0.0))),
        dual=float(max(0.0, -np.min(mu, initial=0.0))),
        complementarity=float(np.max(np.abs(mu * slack), initial=0.0)),
    )


def _kkt_solve(H, N, rhs_top, rhs_bottom):
    n, m = H.shape[0], N.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = N.T
    K[n:, :n] = N
    rhs = np.concatenate([rhs_top, rhs_bottom])
    try:
        sol = linear_solve(K, rhs, assume_a="sym")
    except LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _dual_active_set(p: QpProblem, H, f, tol, max_iter):
    m_e, m_i = p.A_eq.shape[0], p.A_in.shape[0]
    z, lam = _kkt_solve(H, p.A_eq, -f, p.b_eq)
    if m_e and not np.max(np.abs(p.A_eq @ z - p.b_eq)) <= tol:
        logger.debug("equality constraints are inconsistent")
        return QpSolution(z, lam, np.zeros(m_i), QpStatus.INFEASIBLE)
    mu = np.zeros(m_i)
    active = []
    h_scale = max(1.0, float(np.max(np.abs(H))))
    iterations = 0

    while True:
        if m_i == 0:
            break
        viol = p.A_in @ z - p.b_in
        if active:
            viol[active] = -np.inf
        k_add = int(np.argmax(viol))
        if viol[k_add] <= tol:
            break
        a_p = p.A_in[k_add]
        t_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                mu_full = mu.copy()
                mu_full[k_add] = t_p
                return QpSolution(z, lam, mu_full, QpStatus.MAX_ITER, iterations=iterations,
                                  active_set=list(active))
            N = np.vstack([p.A_eq, p.A_in[active]]) if active else p.A_eq
            dz, dr = _kkt_solve(H, N, -a_p, np.zeros(N.shape[0]))
            dr_act = dr[m_e:]

            # Partial step: an active inequality multiplier reaches zero.
            t1, block = np.inf, None
            for j, idx in enumerate(active):
                if dr_act[j] < 0:
                    ratio = mu[idx] / -dr_act[j]
                    if ratio < t1:
                        t1, block = ratio, j

            # Full step: the added constraint becomes active.
            a_dz = float(a_p @ dz)
            if a_dz < -1e-14 * (a_p @ a_p) / h_scale:
                t2 = -float(a_p @ z - p.b_in[k_add]) / a_dz
            else:
                t2 = np.inf

            t = min(t1, t2)
            if not np.isfinite(t):
                mu_full = mu.copy()
                mu_full[k_add] = t_p
                return QpSolution(z, lam, mu_full, QpStatus.INFEASIBLE, iterations=iterations,
                                  active_set=list(active))
            if np.isfinite(t2):
                z = z + t * dz
            lam = lam + t * dr[:m_e]
            for j, idx in enumerate(active):
                mu[idx] += t * dr_act[j]
            t_p += t
            if t2 <= t1:
                mu[k_add] = t_p
                active.append(k_add)
                break
            dropped = active.pop(block)
            mu[dropped] = 0.0

    np.clip(mu, 0.0, None, out=mu)
    return QpSolution(z, lam, mu, QpStatus.OPTIMAL, iterations=iterations, active_set=list(active))


def _is_positive_definite(H):
    if H.size == 0:
        return True
    try:
        cho_factor(H)
        return True
    except LinAlgError:
        return False


def _proximal(p: QpProblem, tol, max_iter):
    rho = 1e-6 * max(1.0, float(np.max(np.abs(p.H))))
    H_reg = p.H + rho * np.eye(p.n)
    z_k = np.zeros(p.n)
    used = 0
    sol = None
    while used < max_iter:
        sol = _dual_active_set(p, H_reg, p.f - rho * z_k, tol, max_iter - used)
        used += max(1, sol.iterations)
        if sol.status is not QpStatus.OPTIMAL:
            return sol
        if np.max(np.abs(sol.z - z_k), initial=0.0) <= 0.1 * tol:
            break
        z_k = sol.z
    else:
        sol.status = QpStatus.MAX_ITER
    sol.iterations = used
    return sol


def solve_qp(p: QpProblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> QpSolution:
    """Solve p; status reports Optimal, Infeasible or MaxIter with residuals attached."""
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol!r}")
    if _is_positive_definite(p.H):
        sol = _dual_active_set(p, p.H, p.f, tol, max_iter)
    else:
        logger.debug("H is only semidefinite; using proximal iterations")
        sol = _proximal(p, tol, max_iter)
    sol.kkt = check_kkt(p, sol)
    if sol.status is QpStatus.OPTIMAL:
        scale = max(1.0, float(np.max(np.abs(p.H))) * float(np.max(np.abs(sol.z), initial=0.0)),
                    float(np.max(np.abs(p.f), initial=0.0)))
        k = sol.kkt
        if (k.stationarity > tol * scale or k.primal_eq > tol or k.primal_in > tol
                or k.dual > tol or k.complementarity > tol * scale):
            logger.warning("QP finished with KKT residual %.3g above tolerance", k.worst())
            sol.status = QpStatus.MAX_ITER
    return sol


solve = solve_qp
