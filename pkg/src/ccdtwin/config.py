"""Experiment configuration: packaged defaults, strict validation, builders.

The packaged YAML files under ``ccdtwin/configs/`` are the single source of
case constants (plant parameters, bounds, training protocol). A user config
file starts from the packaged defaults for its ``case`` and may override any
known key; unknown keys are rejected with the exact dotted path, so typos
never pass silently. Builders at the bottom turn a validated config into the
library objects the pipeline consumes.
"""

from __future__ import annotations

import copy
from importlib import resources

import numpy as np
import yaml

from . import dynamics as dyn
from . import envsim as sim
from . import ppo
from . import pretrain
from . import profiles


class ConfigError(ValueError):
    """Any malformed, unknown, or ill-typed configuration content."""


# -- schema ----------------------------------------------------------------------

def _float(v, path):
    if isinstance(v, bool):
        raise ConfigError(f"{path}: expected a number, got a boolean")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            pass
    raise ConfigError(f"{path}: expected a number, got {v!r}")


def _int(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    return v


def _bool(v, path):
    if not isinstance(v, bool):
        raise ConfigError(f"{path}: expected true/false, got {v!r}")
    return v


def _str(v, path):
    if not isinstance(v, str):
        raise ConfigError(f"{path}: expected a string, got {v!r}")
    return v


def _float_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a non-empty list of numbers")
    return [_float(x, f"{path}[{i}]") for i, x in enumerate(v)]


def _int_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a non-empty list of integers")
    return [_int(x, f"{path}[{i}]") for i, x in enumerate(v)]


def _bool_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a non-empty list of booleans")
    return [_bool(x, f"{path}[{i}]") for i, x in enumerate(v)]


def _str_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a non-empty list of strings")
    return [_str(x, f"{path}[{i}]") for i, x in enumerate(v)]


def _float_grid(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a list of number lists")
    return [_float_list(row, f"{path}[{i}]") for i, row in enumerate(v)]


def _optional(leaf):
    def check(v, path):
        return None if v is None else leaf(v, path)
    return check


_COMMON_SCHEMA = {
    "case": _str,
    "seed": _int,
    "design": {
        "names": _str_list,
        "lower": _float_list,
        "upper": _float_list,
        "initial": _float_list,
    },
    "reward": {
        "q_diag": _float_list,
        "r_u": _float,
        "quantile_penalty_scale": _float,
    },
    "pretrain": {
        "n_samples": _int,
        "horizon": _int,
        "terminal_tol": _float,
        "sample_state_low": _float_list,
        "sample_state_high": _float_list,
        "epochs": _int,
        "lr": _float,
    },
    "ppo": {
        "epochs": _int,
        "lr": _float,
        "clip_eps": _float,
        "value_coef": _float,
        "episodes_per_epoch": _int,
        "minibatch": _int,
        "update_passes": _int,
        "gamma": _float,
        "lam": _float,
        "horizon": _int,
        "x0_low": _float_list,
        "x0_high": _float_list,
        "action_scale": _float,
        "hidden": _int_list,
        "tanh_layers": _bool_list,
        "pathwise_env_grad": _bool,
    },
    "discrepancy": {
        "epochs": _int,
        "lr": _float,
        "val_fraction": _float,
        "hidden": _int_list,
        "residual_mode": _str,
    },
    "lifecycle": {
        "deploy_epochs": _int,
        "deploy_episodes_per_epoch": _int,
        "deploy_horizon": _int,
        "fine_tune": _bool,
        "step3_epochs": _optional(_int),
        "step3_sigma_reset": _optional(_float),
        "eval_rollouts": _int,
        "eval_horizon": _int,
        "sigma_ss_window": _int,
    },
}

_ILLUSTRATIVE_SCHEMA = copy.deepcopy(_COMMON_SCHEMA)
_ILLUSTRATIVE_SCHEMA["plant"] = {
    "input_low": _float,
    "input_high": _float,
    "state_low": _float_list,
    "state_high": _float_list,
    "process_noise_std": _float_list,
}
_ILLUSTRATIVE_SCHEMA["truth"] = {
    "gap": {
        "bias": _bool,
        "uniform": _bool,
        "state_nl": _bool,
        "input_nl": _bool,
        "process_noise": _bool,
    },
}

_SUSPENSION_SCHEMA = copy.deepcopy(_COMMON_SCHEMA)
_SUSPENSION_SCHEMA["plant"] = {
    "m_s": _float,
    "m_us": _float,
    "k_t": _float,
    "c_t": _float,
    "dt": _float,
    "input_low": _float,
    "input_high": _float,
    "state_low": _float_list,
    "state_high": _float_list,
    "zdot_std": _float,
    "nl_fraction": _float,
    "substeps": _int,
    "feasibility_box_scale": _float,
}
_SUSPENSION_SCHEMA["profiles"] = {
    "road": {
        "length_m": _float, "grid_m": _float,
        "n_bumps": _int, "n_dents": _int, "n_ramps": _int, "n_jumps": _int,
        "bump_height_m": _float, "bump_width_m": _float,
        "dent_depth_m": _float, "dent_width_m": _float,
        "ramp_height_m": _float, "ramp_length_m": _float,
        "jump_height_m": _float,
        "noise_std_m": _float, "noise_smooth_m": _float,
        "max_elevation_m": _float, "taper_m": _float,
    },
    "speed": {
        "n_steps": _int, "dt_s": _float,
        "v_mean_mps": _float, "v_init_mps": _float,
        "reversion_rate": _float, "volatility": _float,
        "v_min_mps": _float, "v_max_mps": _float,
    },
}
_SUSPENSION_SCHEMA["lifecycle"]["canonical_ics"] = _float_grid

_SCHEMAS = {"illustrative": _ILLUSTRATIVE_SCHEMA, "suspension": _SUSPENSION_SCHEMA}

CASES = tuple(sorted(_SCHEMAS))


def _validate(node, schema, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    out = {}
    for key, value in node.items():
        dotted = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"{dotted}: unknown key")
        rule = schema[key]
        if isinstance(rule, dict):
            out[key] = _validate(value, rule, dotted)
        else:
            out[key] = rule(value, dotted)
    for key in schema:
        if key not in out:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"{dotted}: missing required key")
    return out


def _deep_merge(base: dict, override: dict, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{dotted}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected a mapping")
            out[key] = _deep_merge(base[key], value, dotted)
        else:
            out[key] = value
    return out


def default_config(case: str) -> dict:
    if case not in _SCHEMAS:
        raise ConfigError(f"unknown case {case!r}; expected one of {CASES}")
    text = resources.files("ccdtwin").joinpath(f"configs/{case}.yaml").read_text()
    raw = yaml.safe_load(text)
    return _validate(raw, _SCHEMAS[case], "")


def load_config(source: str, seed: int | None = None) -> dict:
    """Resolve a case name or a YAML file into a validated config.

    A file must name its ``case``; its entries override the packaged
    defaults for that case. ``seed`` (from the CLI) overrides both.
    """
    if source in _SCHEMAS:
        cfg = default_config(source)
    else:
        try:
            with open(source, "r", encoding="utf-8") as fh:
                user = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(
                f"{source!r} is neither a case name {CASES} nor a config file")
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: invalid YAML ({exc})")
        if not isinstance(user, dict) or "case" not in user:
            raise ConfigError(f"{source}: config file must set 'case'")
        base = default_config(str(user["case"]))
        merged = _deep_merge(base, user)
        cfg = _validate(merged, _SCHEMAS[str(user["case"])], "")
    if seed is not None:
        cfg["seed"] = int(seed)
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: dict) -> None:
    d = len(cfg["design"]["names"])
    for key in ("lower", "upper", "initial"):
        if len(cfg["design"][key]) != d:
            raise ConfigError(f"design.{key}: length must match design.names")
    lo, hi = np.array(cfg["design"]["lower"]), np.array(cfg["design"]["upper"])
    init = np.array(cfg["design"]["initial"])
    if np.any(lo >= hi):
        raise ConfigError("design: lower bounds must be strictly below upper")
    if np.any(init < lo) or np.any(init > hi):
        raise ConfigError("design.initial: must lie inside the bounds")
    n = state_dim(cfg)
    for section, key in (("plant", "state_low"), ("plant", "state_high"),
                         ("pretrain", "sample_state_low"),
                         ("pretrain", "sample_state_high"),
                         ("ppo", "x0_low"), ("ppo", "x0_high")):
        if len(cfg[section][key]) != n:
            raise ConfigError(f"{section}.{key}: expected {n} entries")
    if len(cfg["reward"]["q_diag"]) != n:
        raise ConfigError(f"reward.q_diag: expected {n} entries")
    hidden = cfg["ppo"]["hidden"]
    if len(cfg["ppo"]["tanh_layers"]) != len(hidden) + 1:
        raise ConfigError("ppo.tanh_layers: one flag per layer "
                          f"(expected {len(hidden) + 1})")
    if cfg["discrepancy"]["residual_mode"] not in ("open_loop", "one_step"):
        raise ConfigError("discrepancy.residual_mode: expected "
                          "'open_loop' or 'one_step'")
    if cfg["plant"]["input_low"] >= cfg["plant"]["input_high"]:
        raise ConfigError("plant: input_low must be below input_high")


def save_config(cfg: dict, path) -> None:
    """Serialize the effective config; stable key order for digesting."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True, default_flow_style=None)


def state_dim(cfg: dict) -> int:
    return 2 if cfg["case"] == "illustrative" else 4


# -- builders ----------------------------------------------------------------------

def make_design(cfg: dict) -> dyn.DesignParams:
    d = cfg["design"]
    return dyn.DesignParams(names=tuple(d["names"]),
                            lower=np.array(d["lower"]),
                            upper=np.array(d["upper"]),
                            values=np.array(d["initial"]))


def suspension_constants(cfg: dict) -> dyn.SuspensionConstants:
    p = cfg["plant"]
    return dyn.SuspensionConstants(m_s=p["m_s"], m_us=p["m_us"], k_t=p["k_t"],
                                   c_t=p["c_t"], T=p["dt"])


def plant_builder(cfg: dict):
    """Callable mapping design values to the nominal discrete plant."""
    if cfg["case"] == "illustrative":
        return lambda values: dyn.illustrative_plant(float(values[0]))
    const = suspension_constants(cfg)
    return lambda values: dyn.suspension_plant(float(values[0]),
                                               float(values[1]), const)


def make_reward_spec(cfg: dict, quantile_penalty: bool = False) -> sim.RewardSpec:
    Q = np.diag(cfg["reward"]["q_diag"])
    Q_q = cfg["reward"]["quantile_penalty_scale"] * Q if quantile_penalty else None
    return sim.RewardSpec(Q=Q, r_u=cfg["reward"]["r_u"], Q_q=Q_q)


def make_pretrain_case(cfg: dict) -> pretrain.CaseSpec:
    design = make_design(cfg)
    plant = cfg["plant"]
    Q = np.diag(cfg["reward"]["q_diag"])
    if cfg["case"] == "illustrative":
        x_low = np.array(plant["state_low"])
        x_high = np.array(plant["state_high"])
        const = None
    else:
        scale = plant["feasibility_box_scale"]
        x_low = scale * np.array(plant["state_low"])
        x_high = scale * np.array(plant["state_high"])
        const = suspension_constants(cfg)
    problem = pretrain.FeasibilityProblem(
        horizon=cfg["pretrain"]["horizon"],
        x_low=x_low, x_high=x_high,
        u_low=plant["input_low"], u_high=plant["input_high"],
        terminal_tol=cfg["pretrain"]["terminal_tol"],
        Q=Q, r_u=cfg["reward"]["r_u"])
    return pretrain.CaseSpec(kind=cfg["case"], design=design, problem=problem,
                             suspension_constants=const)


def make_agent(cfg: dict, rng: np.random.Generator) -> ppo.Agent:
    return ppo.build_agent(make_design(cfg), state_dim(cfg),
                           hidden=cfg["ppo"]["hidden"],
                           tanh_flags=cfg["ppo"]["tanh_layers"],
                           action_scale=cfg["ppo"]["action_scale"],
                           u_low=cfg["plant"]["input_low"],
                           u_high=cfg["plant"]["input_high"], rng=rng)


def make_ppo_config(cfg: dict, epochs: int | None = None,
                    seed: int | None = None,
                    train_design: bool | None = None) -> ppo.PpoConfig:
    p = cfg["ppo"]
    return ppo.PpoConfig(
        epochs=p["epochs"] if epochs is None else epochs,
        x0_low=np.array(p["x0_low"]), x0_high=np.array(p["x0_high"]),
        clip_eps=p["clip_eps"], value_coef=p["value_coef"], lr=p["lr"],
        episodes_per_epoch=p["episodes_per_epoch"], minibatch=p["minibatch"],
        update_passes=p["update_passes"], gamma=p["gamma"], lam=p["lam"],
        horizon=p["horizon"],
        seed=cfg["seed"] if seed is None else seed,
        train_design=True if train_design is None else train_design,
        pathwise_env_grad=p["pathwise_env_grad"])


def nominal_env_builder(cfg: dict):
    """Training environment: nominal plant plus the assumed disturbance."""
    build = plant_builder(cfg)
    spec = make_reward_spec(cfg)
    u_low, u_high = cfg["plant"]["input_low"], cfg["plant"]["input_high"]
    if cfg["case"] == "illustrative":
        sampler = sim.gaussian_state_noise(
            np.array(cfg["plant"]["process_noise_std"]))

        def builder(design: dyn.DesignParams):
            return sim.NominalEnv(build(design.values), spec, u_low, u_high,
                                  w_sampler=sampler)
    else:
        zdot_std = cfg["plant"]["zdot_std"]

        def builder(design: dyn.DesignParams):
            plant = build(design.values)
            sampler = sim.mapped_scalar_noise(plant.E[:, 0], zdot_std)
            return sim.NominalEnv(plant, spec, u_low, u_high,
                                  w_sampler=sampler)
    return builder


def illustrative_gap(cfg: dict) -> dyn.IllustrativeGap:
    g = cfg["truth"]["gap"]
    return dyn.IllustrativeGap(bias=g["bias"], uniform=g["uniform"],
                               state_nl=g["state_nl"], input_nl=g["input_nl"],
                               process_noise=g["process_noise"])


def road_config(cfg: dict) -> profiles.RoadConfig:
    return profiles.RoadConfig(**cfg["profiles"]["road"])


def speed_config(cfg: dict) -> profiles.SpeedConfig:
    return profiles.SpeedConfig(**cfg["profiles"]["speed"])


def disturbance_series(cfg: dict, seed: int) -> np.ndarray:
    """Road-velocity series zdot0(t_k) for the suspension truth plant."""
    road = profiles.generate_road(road_config(cfg), seed=seed)
    speed = profiles.generate_speed(speed_config(cfg), seed=seed + 1)
    return profiles.disturbance_series(road, speed)


def truth_env_builder(cfg: dict, zdot_series: np.ndarray | None = None):
    """Deployment environment on the hidden truth plant.

    For the suspension, ``zdot_series`` carries the road-velocity
    disturbance; generate it once per deployment with disturbance_series().
    """
    spec = make_reward_spec(cfg)
    u_low, u_high = cfg["plant"]["input_low"], cfg["plant"]["input_high"]
    if cfg["case"] == "illustrative":
        gap = illustrative_gap(cfg)
        build = plant_builder(cfg)

        def builder(design: dyn.DesignParams):
            return sim.TruthIllustrativeEnv(build(design.values), spec,
                                            u_low, u_high, gap=gap)
    else:
        if zdot_series is None:
            raise ValueError("suspension truth env needs a zdot series")
        const = suspension_constants(cfg)
        nl = cfg["plant"]["nl_fraction"]
        substeps = cfg["plant"]["substeps"]

        def builder(design: dyn.DesignParams):
            truth = dyn.SuspensionTruth.build(
                design.values[0], design.values[1], const,
                nl_fraction=nl, substeps=substeps)
            return sim.TruthSuspensionEnv(truth, spec, u_low, u_high,
                                          zdot_series=zdot_series)
    return builder
