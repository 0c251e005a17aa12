import numpy as np
import pytest
import yaml

from ccdtwin import config
from ccdtwin.config import ConfigError


def test_default_configs_load_and_validate():
    for case in ("illustrative", "suspension"):
        cfg = config.load_config(case)
        assert cfg["case"] == case
        assert isinstance(cfg["seed"], int)
        assert len(cfg["design"]["names"]) == len(cfg["design"]["initial"])


def test_bad_case_name_rejected():
    with pytest.raises(ConfigError, match="neither a case name"):
        config.load_config("nope")


def test_seed_override():
    cfg = config.load_config("illustrative", seed=5)
    assert cfg["seed"] == 5


def test_unknown_key_rejected_with_dotted_path(tmp_path):
    f = tmp_path / "user.yaml"
    f.write_text("case: illustrative\nppo:\n  bogus: 1\n")
    with pytest.raises(ConfigError, match=r"ppo\.bogus"):
        config.load_config(f)


def test_unknown_toplevel_key_rejected(tmp_path):
    f = tmp_path / "user.yaml"
    f.write_text("case: illustrative\nturbo: true\n")
    with pytest.raises(ConfigError, match="turbo"):
        config.load_config(f)


def test_missing_key_detected():
    cfg = config.load_config("illustrative")
    del cfg["ppo"]["lr"]
    with pytest.raises(ConfigError, match=r"ppo\.lr"):
        config._validate(cfg, config._SCHEMAS["illustrative"], "")


def test_user_file_without_case_rejected(tmp_path):
    f = tmp_path / "user.yaml"
    f.write_text("seed: 3\n")
    with pytest.raises(ConfigError, match="case"):
        config.load_config(f)


def test_deep_merge_overrides_leaf_keeps_rest(tmp_path):
    base = config.load_config("illustrative")
    f = tmp_path / "user.yaml"
    f.write_text("case: illustrative\nseed: 42\nppo:\n  lr: 3.0e-4\n")
    cfg = config.load_config(f)
    assert cfg["seed"] == 42
    assert cfg["ppo"]["lr"] == pytest.approx(3e-4)
    # untouched siblings keep their defaults
    assert cfg["ppo"]["epochs"] == base["ppo"]["epochs"]
    assert cfg["ppo"]["hidden"] == base["ppo"]["hidden"]


def test_numeric_string_coerced(tmp_path):
    # PyYAML reads a bare 1e-4 as a string; the validator must still accept it
    f = tmp_path / "user.yaml"
    f.write_text("case: illustrative\nppo:\n  lr: 1e-4\n")
    cfg = config.load_config(f)
    assert isinstance(cfg["ppo"]["lr"], float)
    assert cfg["ppo"]["lr"] == pytest.approx(1e-4)


@pytest.mark.parametrize("patch,frag", [
    ("design:\n  initial: [3.0]", "initial"),
    ("design:\n  lower: [2.5]", "lower"),
    ("ppo:\n  tanh_layers: [true, false]", "tanh_layers"),
    ("discrepancy:\n  residual_mode: sideways", "residual_mode"),
    ("plant:\n  input_low: 2.0", "input"),
])
def test_consistency_checks(tmp_path, patch, frag):
    f = tmp_path / "user.yaml"
    f.write_text("case: illustrative\n" + patch + "\n")
    with pytest.raises(ConfigError, match=frag):
        config.load_config(f)


def test_wrong_type_rejected(tmp_path):
    f = tmp_path / "user.yaml"
    f.write_text("case: illustrative\nseed: [1, 2]\n")
    with pytest.raises(ConfigError, match="seed"):
        config.load_config(f)


def test_save_config_round_trip_and_stable_bytes(tmp_path):
    cfg = config.load_config("suspension", seed=9)
    p1, p2 = tmp_path / "a.yaml", tmp_path / "b.yaml"
    config.save_config(cfg, p1)
    config.save_config(cfg, p2)
    assert p1.read_bytes() == p2.read_bytes()
    re = config.load_config(p1)
    assert re == cfg


def test_make_design_and_reward():
    cfg = config.load_config("illustrative")
    design = config.make_design(cfg)
    assert design.names == ("p",)
    assert design.lower[0] == pytest.approx(0.5)
    assert design.upper[0] == pytest.approx(2.0)
    spec = config.make_reward_spec(cfg)
    assert spec.Q_q is None
    spec_q = config.make_reward_spec(cfg, quantile_penalty=True)
    scale = cfg["reward"]["quantile_penalty_scale"]
    np.testing.assert_allclose(spec_q.Q_q, scale * np.diag(cfg["reward"]["q_diag"]))


def test_plant_builders():
    cfg = config.load_config("illustrative")
    plant = config.plant_builder(cfg)(np.array([1.3]))
    assert plant.A.shape == (2, 2)
    scfg = config.load_config("suspension")
    splant = config.plant_builder(scfg)(np.array([27692.0, 1906.5]))
    assert splant.A.shape == (4, 4)
    assert splant.E is not None and splant.E.shape == (4, 1)


def test_nominal_env_builders_roll():
    for case in ("illustrative", "suspension"):
        cfg = config.load_config(case)
        design = config.make_design(cfg)
        env = config.nominal_env_builder(cfg)(design)
        d = config.state_dim(cfg)
        rng = np.random.default_rng(0)
        X = np.zeros((3, d))
        env.begin(X, rng)
        X1, w, blown = env.step(X, np.zeros(3))
        assert X1.shape == (3, d)
        assert blown is None or not np.any(blown)


def test_truth_env_builder_suspension_needs_series():
    cfg = config.load_config("suspension")
    with pytest.raises(ValueError, match="zdot"):
        config.truth_env_builder(cfg)
    series = config.disturbance_series(cfg, seed=cfg["seed"])
    assert series.shape == (cfg["profiles"]["speed"]["n_steps"],)
    env = config.truth_env_builder(cfg, series)(config.make_design(cfg))
    rng = np.random.default_rng(1)
    X = np.zeros((2, 4))
    env.begin(X, rng)
    X1, _, _ = env.step(X, np.zeros(2))
    assert np.all(np.isfinite(X1))


def test_make_ppo_config_overrides():
    cfg = config.load_config("illustrative")
    pc = config.make_ppo_config(cfg)
    assert pc.epochs == cfg["ppo"]["epochs"]
    assert pc.seed == cfg["seed"]
    pc2 = config.make_ppo_config(cfg, epochs=3, seed=11, train_design=False)
    assert pc2.epochs == 3 and pc2.seed == 11 and not pc2.train_design


def test_make_agent_dims():
    cfg = config.load_config("suspension")
    agent = config.make_agent(cfg, np.random.default_rng(0))
    assert agent.policy.mean_net.in_dim == 4 + 2
    assert agent.policy.action_scale == pytest.approx(5000.0)


def test_pretrain_case_boxes():
    cfg = config.load_config("suspension")
    case = config.make_pretrain_case(cfg)
    scale = cfg["plant"]["feasibility_box_scale"]
    np.testing.assert_allclose(case.problem.x_high,
                               scale * np.array(cfg["plant"]["state_high"]))
