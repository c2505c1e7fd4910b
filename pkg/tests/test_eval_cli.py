import math

import numpy as np
import pytest

import config
import eval_cli
from errors import NonFiniteLoss, NoOrbit
from policy_net import MlpPolicy, save
from utils import read_csv

# one env step per swing keeps the command runs short
SMALL = """
env.f_plan = 4
env.max_steps = 10
experiment.seeds = 0
track.duration = 1.0
track.profile = 0:0.0
turn.yaw_rate = 0.0
turn.max_steps = 4
push.warmup_steps = 1
push.survive_steps = 2
push.directions = 2
push.types = short
push.max_force = 30
push.bisect_iters = 2
push.force_step = 10
slope.values = 0.0
ppo.n_envs = 1
ppo.rollout_len = 8
ppo.max_env_steps = 8
ppo.minibatch_size = 8
ppo.epochs = 1
policy.hidden = 8, 8
"""


def write_config(tmp_path, extra=""):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL + extra, encoding="utf-8")
    return path


def run(tmp_path, command, extra="", *flags):
    cfg = write_config(tmp_path, extra)
    out = tmp_path / "out"
    return eval_cli.main([command, "--config", str(cfg), "--out", str(out), "--log-level", "WARNING", *flags]), out


def test_orbit_report(tmp_path, capsys):
    code, _ = run(tmp_path, "orbit", "orbit.vx = 0.5\n")
    assert code == 0
    text = capsys.readouterr().out
    assert "stance left (sigma=+1)" in text
    assert "stance right (sigma=-1)" in text
    assert text.count("closure_residual") == 2


def test_orbit_without_config(tmp_path, capsys):
    assert eval_cli.main(["orbit", "--out", str(tmp_path)]) == 0
    assert "L_x_main" in capsys.readouterr().out


def test_track_zero_profile(tmp_path):
    code, out = run(tmp_path, "track")
    assert code == 0
    frame, meta = read_csv(out / "track.csv")
    assert list(frame.columns) == ["t", "v_cmd", "v_meas_MPC"]
    assert len(frame) == 4
    np.testing.assert_allclose(frame["v_meas_MPC"], 0.0, atol=1e-9)
    settings = config.load_settings(tmp_path / "small.cfg")
    assert meta["config_hash"] == config.settings_hash(settings)
    assert meta["seed"] == "0"


def test_flat_slope_matches_track(tmp_path):
    assert run(tmp_path, "track")[0] == 0
    code, out = run(tmp_path, "slope")
    assert code == 0
    slope, _ = read_csv(out / "slope_0.0.csv")
    track, _ = read_csv(out / "track.csv")
    np.testing.assert_array_equal(slope.to_numpy(), track.to_numpy())


def test_turn_without_yaw_rate(tmp_path):
    code, out = run(tmp_path, "turn")
    assert code == 0
    frame, meta = read_csv(out / "turn.csv")
    assert frame["completed_turns"].tolist() == [0]
    assert frame["yaw_rate_error"].iloc[0] == pytest.approx(0.0, abs=1e-12)
    assert meta["command"] == "turn"


@pytest.mark.parametrize("protocol", ["independent", "sequential"])
def test_small_push_grid(tmp_path, protocol):
    code, out = run(tmp_path, "push", f"push.protocol = {protocol}\n")
    assert code == 0
    frame, meta = read_csv(out / "push.csv")
    assert len(frame) == 2
    assert frame["direction"].tolist() == pytest.approx([0.0, math.pi])
    weight = 39.0 * 9.81
    np.testing.assert_allclose(frame["max_force_normalized"], 30.0 / weight)
    assert meta["protocol"] == protocol


def test_unknown_push_protocol(tmp_path):
    code, _ = run(tmp_path, "push", "push.protocol = random\n")
    assert code == 2


def test_checkpoint_controllers(tmp_path):
    ckpt = tmp_path / "zero.asrp"
    save(MlpPolicy(), ckpt)
    code, out = run(tmp_path, "track", f"experiment.checkpoint = {ckpt}\n")
    assert code == 0
    frame, _ = read_csv(out / "track.csv")
    assert list(frame.columns) == ["t", "v_cmd", "v_meas_MPC", "v_meas_MPC+RL"]
    np.testing.assert_array_equal(frame["v_meas_MPC"], frame["v_meas_MPC+RL"])


def test_rl_only_uses_nominal_footholds(tmp_path):
    ckpt = tmp_path / "zero.asrp"
    save(MlpPolicy(), ckpt)
    code, out = run(tmp_path, "track", f"experiment.checkpoint = rl-only:{ckpt}\n")
    assert code == 0
    frame, _ = read_csv(out / "track.csv")
    assert list(frame.columns) == ["t", "v_cmd", "v_meas_RL-only"]
    np.testing.assert_allclose(frame["v_meas_RL-only"], 0.0, atol=1e-9)


def test_train_writes_policy_and_evaluation(tmp_path):
    code, out = run(tmp_path, "train")
    assert code == 0
    assert (out / "policy.asrp").is_file()
    metrics, meta = read_csv(out / "metrics.csv")
    assert len(metrics) == 1
    assert meta["command"] == "train"
    evaluation, _ = read_csv(out / "eval.csv")
    assert sorted(set(evaluation["controller"])) == ["MPC+RL", "base"]


def test_compare_reports_auc(tmp_path):
    code, out = run(tmp_path, "compare")
    assert code == 0
    frame, meta = read_csv(out / "compare.csv")
    assert len(frame) == 1
    assert "auc_mpc_rl_seed0" in meta and "auc_rl_only_seed0" in meta
    assert meta["auc_mpc_rl_wins"] in ("0/1", "1/1")
    assert (out / "rl_only_seed0" / "policy.asrp").is_file()


def test_seed_flag_overrides_seeds(tmp_path):
    code, out = run(tmp_path, "turn", "", "--seed", "5")
    assert code == 0
    frame, _ = read_csv(out / "turn.csv")
    assert frame["seed"].tolist() == [5]


# ------------------------------------------------------------------ exit codes

def test_missing_config_file(tmp_path):
    assert eval_cli.main(["orbit", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


def test_unknown_setting(tmp_path):
    assert run(tmp_path, "orbit", "alip.mass = 3\n")[0] == 2


def test_missing_checkpoint(tmp_path):
    assert run(tmp_path, "track", f"experiment.checkpoint = {tmp_path / 'gone.asrp'}\n")[0] == 2


def test_divergence_exit_code(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise NonFiniteLoss("surrogate=nan")

    monkeypatch.setattr(eval_cli, "train", diverge)
    assert run(tmp_path, "train")[0] == 4


def test_no_orbit_exit_code(tmp_path, monkeypatch):
    def singular(*args, **kwargs):
        raise NoOrbit("singular")

    monkeypatch.setattr(eval_cli, "periodic_orbit", singular)
    assert run(tmp_path, "orbit")[0] == 3


def test_profile_lookup():
    profile = ((0.0, 0.0), (2.0, 0.5), (4.0, 0.925))
    assert eval_cli.profile_value(profile, 0.0) == 0.0
    assert eval_cli.profile_value(profile, 1.99) == 0.0
    assert eval_cli.profile_value(profile, 2.0) == 0.5
    assert eval_cli.profile_value(profile, 10.0) == 0.925
