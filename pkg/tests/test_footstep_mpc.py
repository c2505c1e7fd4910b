import numpy as np
import pytest

from alip_core import (
    B_FOOTHOLD,
    AlipParams,
    GaitCommand,
    StanceSign,
    alip_transition,
    orbit_start_state,
    periodic_orbit,
    reference_states,
    rotate_state,
)
from errors import DimensionMismatch, InvalidParams
from footstep_mpc import MpcConfig, build_qp, nominal_plan, plan, replan_schedule, stance_signs

PARAMS = AlipParams()


def closed_loop(x_start, gait, sigma, n_steps, cfg, params=PARAMS):
    """Exact ALIP, replanning once per step; returns pre-impact states."""
    Phi = alip_transition(params, params.T_s)
    x = x_start
    ends = []
    for _ in range(n_steps):
        result = plan(x, params.T_s, gait, sigma, 0.0, 0.0, cfg, params)
        x_end = Phi @ x
        ends.append(x_end)
        x = x_end + B_FOOTHOLD @ result.u0
        sigma = StanceSign(-int(sigma))
    return ends


@pytest.mark.parametrize("sigma", list(StanceSign))
def test_on_orbit_returns_orbit_foothold(sigma):
    gait = GaitCommand(L_y_des=0.5 * PARAMS.mzh)
    x = orbit_start_state(PARAMS, gait, sigma).as_array()
    result = plan(x, PARAMS.T_s, gait, sigma, 0.0, 0.0, MpcConfig(), PARAMS)
    np.testing.assert_allclose(result.u0, periodic_orbit(PARAMS, gait, sigma).foothold, atol=1e-6)
    assert result.slack_norm == 0.0
    assert result.objective == pytest.approx(0.0, abs=1e-8)
    assert result.u_seq.shape == (3, 2)


def test_plan_is_heading_invariant():
    gait = GaitCommand(L_y_des=0.3 * PARAMS.mzh)
    x = orbit_start_state(PARAMS, gait, StanceSign.LEFT).as_array() + np.array([0.0, 0.0, 0.5, -1.0])
    straight = plan(x, 0.1, gait, StanceSign.LEFT, 0.0, 0.0, MpcConfig(), PARAMS)
    turned = plan(rotate_state(x, 0.9), 0.1, gait, StanceSign.LEFT, 0.9, 0.9, MpcConfig(), PARAMS)
    np.testing.assert_allclose(turned.u0, straight.u0, atol=1e-8)
    assert turned.gamma0 == pytest.approx(0.9)


@pytest.mark.slow
def test_closed_loop_tracks_momentum_on_exact_model(rng):
    cfg = MpcConfig()
    for _ in range(20):
        gait = GaitCommand(L_y_des=rng.uniform(-0.8, 0.8) * PARAMS.mzh)
        x = orbit_start_state(PARAMS, gait, StanceSign.LEFT).as_array()
        x[2:] += rng.normal(0.0, 0.05 * PARAMS.mzh, 2)
        ends = closed_loop(x, gait, StanceSign.LEFT, 8, cfg)
        assert abs(ends[-1][3] - gait.L_y_des) <= 1e-3 * PARAMS.mzh


def test_matches_grid_search_single_step():
    cfg = MpcConfig(N_s=1, Q=np.eye(4))
    gait = GaitCommand(L_y_des=0.4 * PARAMS.mzh)
    sigma = StanceSign.LEFT
    x = orbit_start_state(PARAMS, gait, sigma).as_array() + np.array([0.01, 0.0, 0.8, -0.6])
    result = plan(x, PARAMS.T_s, gait, sigma, 0.0, 0.0, cfg, PARAMS)
    assert result.slack_norm == 0.0

    Phi = alip_transition(PARAMS, PARAMS.T_s)
    x0 = Phi @ x
    ref = reference_states(PARAMS, gait, sigma, 1)[0].as_array()
    best = np.inf
    for ux in result.u0[0] + np.linspace(-0.1, 0.1, 81):
        for uy in result.u0[1] + np.linspace(-0.1, 0.1, 81):
            post = x0[:2] - np.array([ux, uy])
            feasible = (np.all(np.abs(post) <= cfg.kin_box) and -cfg.u_bounds[1] <= uy <= -cfg.min_width
                        and abs(ux) <= cfg.u_bounds[0])
            if not feasible:
                continue
            e = Phi @ (x0 + B_FOOTHOLD @ np.array([ux, uy])) - ref
            best = min(best, float(e @ cfg.Q_f @ e))
    assert np.isfinite(best)
    assert result.objective <= best + 1e-9


def grid_costs(x0, refs, cfg, sigma, U, params=PARAMS, tol=1e-7):
    """Tracking cost and hard feasibility of every row of U = [u_0, u_1, ...] (vectorised)."""
    Phi = alip_transition(params, params.T_s)
    reach = 2.0 * cfg.mu_friction * params.z_H
    x = np.tile(x0, (len(U), 1))
    cost = np.zeros(len(U))
    feasible = np.ones(len(U), dtype=bool)
    for i, sig in enumerate(stance_signs(sigma, cfg.N_s)):
        u = U[:, 2 * i:2 * i + 2]
        lateral = -sig * u[:, 1]
        feasible &= np.all(np.abs(x[:, :2] - u) <= np.asarray(cfg.kin_box) + tol, axis=1)
        feasible &= np.all(np.abs(u) <= reach + tol, axis=1)
        feasible &= np.abs(u[:, 0]) <= cfg.u_bounds[0] + tol
        feasible &= (lateral >= cfg.min_width - tol) & (lateral <= cfg.u_bounds[1] + tol)
        x = (x + u @ B_FOOTHOLD.T) @ Phi.T
        W = cfg.Q_f if i == cfg.N_s - 1 else cfg.Q
        e = x - refs[i].as_array()
        cost += np.einsum("ij,jk,ik->i", e, W, e)
    return cost, feasible


@pytest.mark.parametrize("sigma", list(StanceSign))
def test_two_step_plan_matches_grid_search(sigma):
    cfg = MpcConfig(N_s=2)
    gait = GaitCommand()
    result = plan(np.zeros(4), PARAMS.T_s, gait, sigma, 0.0, 0.0, cfg, PARAMS)
    assert result.slack_norm == 0.0
    assert abs(result.u0[0]) <= 1e-8
    assert -int(sigma) * result.u0[1] >= cfg.min_width - 1e-9

    offsets = np.linspace(-0.04, 0.04, 9)
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, offsets, indexing="ij"), axis=-1).reshape(-1, 4)
    refs = reference_states(PARAMS, gait, sigma, 2)
    cost, feasible = grid_costs(np.zeros(4), refs, cfg, sigma, result.u_seq.ravel() + grid)
    assert feasible.sum() > 1
    best = float(np.min(cost[feasible]))
    assert result.objective <= best + 1e-7 * max(1.0, best)
    assert best <= result.objective + 1e-7 * max(1.0, best)


def test_replanning_mid_step_keeps_first_foothold():
    cfg = MpcConfig()
    gait = GaitCommand(L_y_des=0.4 * PARAMS.mzh)
    x = orbit_start_state(PARAMS, gait, StanceSign.LEFT).as_array() + np.array([0.02, -0.01, 1.5, -2.0])
    first = plan(x, PARAMS.T_s, gait, StanceSign.LEFT, 0.0, 0.0, cfg, PARAMS)
    for elapsed in (0.05, 0.1, 0.2):
        x_mid = alip_transition(PARAMS, elapsed) @ x
        again = plan(x_mid, PARAMS.T_s - elapsed, gait, StanceSign.LEFT, 0.0, 0.0, cfg, PARAMS)
        np.testing.assert_allclose(again.u0, first.u0, rtol=0, atol=1e-6)


def test_sagittal_mirror_mirrors_forward_foothold():
    cfg = MpcConfig()
    gait = GaitCommand(L_y_des=0.5 * PARAMS.mzh)
    mirrored_gait = GaitCommand(L_y_des=-0.5 * PARAMS.mzh)
    x = orbit_start_state(PARAMS, gait, StanceSign.RIGHT).as_array() + np.array([0.03, 0.01, -0.8, 2.5])
    mirror = np.array([-1.0, 1.0, 1.0, -1.0])
    result = plan(x, 0.1, gait, StanceSign.RIGHT, 0.0, 0.0, cfg, PARAMS)
    mirrored = plan(mirror * x, 0.1, mirrored_gait, StanceSign.RIGHT, 0.0, 0.0, cfg, PARAMS)
    np.testing.assert_allclose(mirrored.u_seq[:, 0], -result.u_seq[:, 0], rtol=0, atol=1e-8)
    np.testing.assert_allclose(mirrored.u_seq[:, 1], result.u_seq[:, 1], rtol=0, atol=1e-8)


def test_kinematic_box_softened_when_infeasible():
    gait = GaitCommand()
    x = np.array([0.0, 0.9, 0.0, 0.0])
    result = plan(x, 0.0, gait, StanceSign.LEFT, 0.0, 0.0, MpcConfig(), PARAMS)
    assert result.slack_norm > 0.0
    assert np.all(np.abs(result.u_seq) <= 0.6 + 1e-8)


def test_lateral_foothold_respects_stance_side():
    gait = GaitCommand()
    x = orbit_start_state(PARAMS, gait, StanceSign.RIGHT).as_array() + np.array([0.0, 0.0, -3.0, 0.0])
    result = plan(x, PARAMS.T_s, gait, StanceSign.RIGHT, 0.0, 0.0, MpcConfig(), PARAMS)
    for sig, u in zip(stance_signs(StanceSign.RIGHT, 3), result.u_seq):
        assert sig * u[1] <= -0.05 + 1e-8


def test_nominal_plan_uses_orbit():
    gait = GaitCommand(L_y_des=10.0, yaw_rate_des=1.0)
    result = nominal_plan(gait, StanceSign.LEFT, 0.2, 2, PARAMS)
    np.testing.assert_array_equal(result.u0, periodic_orbit(PARAMS, gait, StanceSign.LEFT).foothold)
    np.testing.assert_array_equal(result.u_seq[1], periodic_orbit(PARAMS, gait, StanceSign.RIGHT).foothold)
    assert result.gamma0 == pytest.approx(0.45)


def test_replan_schedule():
    sched = replan_schedule(114.0, 0.25)
    assert len(sched) == 29
    assert sched[0] == 0.0
    assert sched[-1] < 0.25
    np.testing.assert_array_equal(replan_schedule(4.0, 0.25), [0.0])
    np.testing.assert_array_equal(replan_schedule(2.0, 0.25), [0.0])


def test_stance_signs():
    assert stance_signs(StanceSign.LEFT, 4) == [1, -1, 1, -1]


def test_build_qp_checks_references():
    cfg = MpcConfig()
    refs = reference_states(PARAMS, GaitCommand(), StanceSign.LEFT, 2)
    with pytest.raises(DimensionMismatch):
        build_qp(np.zeros(4), refs, cfg, StanceSign.LEFT, PARAMS)
    with pytest.raises(DimensionMismatch):
        build_qp(np.zeros(3), refs + refs[:1], cfg, StanceSign.LEFT, PARAMS)


@pytest.mark.parametrize("kwargs", [{"N_s": 0}, {"Q": -np.eye(4)}, {"kin_box": (0.0, 0.3)}, {"min_width": 0.7}])
def test_config_validation(kwargs):
    with pytest.raises(InvalidParams):
        MpcConfig(**kwargs)
