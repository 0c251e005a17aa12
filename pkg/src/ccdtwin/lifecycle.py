"""Generation lifecycle: pretrain, co-design, deploy, correct, re-optimize.

Orchestrates the full loop. Sampled optimal-control pretraining seeds the
networks (generation 0); joint policy/design optimization on the nominal
model produces generation 1; deployment against the hidden truth plant
yields residual data; a quantile discrepancy model corrects the simulator;
re-optimization under the corrected, uncertainty-penalized model produces
generation 2 (and so on for further generations). Every stage persists an
append-only registry record whose manifest digests make reruns comparable
byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import discrepancy as disc
from . import dynamics as dyn
from . import envsim as sim
from . import ppo
from . import pretrain

log = logging.getLogger(__name__)

# deployment data is kept but the run is flagged above this blow-up fraction
BLOWUP_FLAG_FRACTION = 0.2

# seed stream tags; every rng in a lifecycle run derives from (cfg seed, tag)
_SEED_AGENT = 100
_SEED_TRAIN1 = 1
_SEED_DEPLOY = 2
_SEED_TRAIN2 = 3
_SEED_EVAL_TRUTH = 4   # shared across generations: paired comparison
_SEED_EVAL_TRAJ = 5
_SEED_EVAL_NOMINAL = 6
_SEED_ROAD = 7
_SEED_FIT = 8


def _seed(cfg: dict, tag: int) -> int:
    return int(cfg["seed"]) * 1000 + tag


# -- corrected environment --------------------------------------------------------

class CorrectedEnv:
    """Nominal plant plus the median correction of a quantile model.

    The residual estimate fed to the model recurses internally (e starts at
    zero, then tracks the predicted median); policies never observe it.
    step() reports the upper-lower quantile band width so the reward's Q_q
    term penalizes acting where the model is uncertain. With model=None the
    correction and the width are exactly zero and the dynamics reduce to the
    disturbance-free nominal plant.
    """

    def __init__(self, plant: dyn.DiscretePlant, reward_spec: sim.RewardSpec,
                 u_low: float, u_high: float,
                 model: disc.QuantileModel | None = None):
        if reward_spec.Q_q is None:
            raise ValueError("corrected env needs a width-penalized reward spec")
        self.plant = plant
        self.reward_spec = reward_spec
        self.u_low = float(u_low)
        self.u_high = float(u_high)
        self.model = model
        self._e = None

    @property
    def state_dim(self) -> int:
        return self.plant.state_dim

    def begin(self, X0: np.ndarray, rng: np.random.Generator) -> None:
        self._e = np.zeros((X0.shape[0], self.plant.state_dim))

    def step(self, X: np.ndarray, U: np.ndarray):
        base = dyn.step_nominal(self.plant, X, U)
        if self.model is None:
            return base, np.zeros_like(base), None
        lo, med, hi = self.model.predict(self._e, X, U)
        self._e = med
        return base + med, hi - lo, None


def corrected_env_builder(cfg: dict, model: disc.QuantileModel | None):
    """Training environment for the re-optimization step."""
    build = cfgmod.plant_builder(cfg)
    spec = cfgmod.make_reward_spec(cfg, quantile_penalty=True)
    u_low, u_high = cfg["plant"]["input_low"], cfg["plant"]["input_high"]

    def builder(design: dyn.DesignParams) -> CorrectedEnv:
        return CorrectedEnv(build(design.values), spec, u_low, u_high, model)

    return builder


# -- registry ---------------------------------------------------------------------

_REG_FORMAT = "ccdtwin-registry-v1"


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, sort_keys=True, indent=1)
        fh.write("\n")


class Registry:
    """Append-only store of lifecycle records.

    Each record is a directory; its manifest.json lists the sha256 of every
    file the record contains and index.json orders the records. Finalized
    records are never modified, so two runs produced the same artifacts iff
    their digests agree.
    """

    def __init__(self, root):
        self.root = Path(root)

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def records(self) -> list[str]:
        if not self.index_path.exists():
            return []
        doc = json.loads(self.index_path.read_text(encoding="utf-8"))
        if doc.get("format") != _REG_FORMAT:
            raise ValueError("unrecognized registry index format")
        return list(doc["records"])

    def path(self, name: str) -> Path:
        return self.root / name

    def create(self, name: str) -> Path:
        d = self.root / name
        if d.exists():
            raise FileExistsError(f"registry record {name!r} already exists")
        d.mkdir(parents=True)
        return d

    def finalize(self, name: str, stats: dict, refs: dict | None = None) -> dict:
        """Hash the record's files, write its manifest, append it to the index."""
        d = self.root / name
        files = {p.relative_to(d).as_posix(): _sha256_file(p)
                 for p in sorted(d.rglob("*")) if p.is_file()}
        manifest = {"format": _REG_FORMAT, "record": name,
                    "refs": dict(refs or {}), "stats": _jsonable(stats),
                    "files": files}
        _write_json(d / "manifest.json", manifest)
        names = self.records()
        names.append(name)
        _write_json(self.index_path, {"format": _REG_FORMAT, "records": names})
        return manifest

    def manifest(self, name: str) -> dict:
        return json.loads((self.root / name / "manifest.json")
                          .read_text(encoding="utf-8"))

    def verify(self) -> list[str]:
        """Record files whose content no longer matches the stored digest."""
        bad = []
        for name in self.records():
            for rel, digest in self.manifest(name)["files"].items():
                p = self.root / name / rel
                if not p.exists() or _sha256_file(p) != digest:
                    bad.append(f"{name}/{rel}")
        return bad

    def digest(self) -> str:
        """One content hash over every finalized record, in index order.

        Hashes each record's manifest bytes, which cover its file digests,
        stats, and refs; two registries agree iff their records agree.
        """
        h = hashlib.sha256()
        for name in self.records():
            h.update(name.encode())
            h.update((self.root / name / "manifest.json").read_bytes())
        return h.hexdigest()


def save_agent(agent: ppo.Agent, path) -> None:
    _write_json(path, agent.to_dict())


def load_agent(path) -> ppo.Agent:
    return ppo.Agent.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_snapshot(cfg: dict, record_dir: Path) -> None:
    saved = cfgmod.load_config(record_dir / "config.yaml")
    if saved != cfg:
        raise cfgmod.ConfigError(
            f"existing record {record_dir.name!r} was produced with a "
            "different configuration; use a fresh output directory")


def _pretrain_history_csv(path, hist: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "value_loss"])
        for k, (lm, lv) in enumerate(zip(hist["mean_loss"], hist["value_loss"])):
            w.writerow([k, "%.17g" % lm, "%.17g" % lv])


def _fit_history_csv(path, fitres: disc.FitResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_pinball", "val_pinball"])
        for k, (lt, lv) in enumerate(zip(fitres.train_losses, fitres.val_losses)):
            w.writerow([k, "%.17g" % lt, "%.17g" % lv])


# -- lifecycle steps --------------------------------------------------------------

def run_pretrain(cfg: dict, registry: Registry, workers: int = 1) -> ppo.Agent:
    """Step 0: sample constrained-optimal actions and fit the networks.

    Persists the gen-000 record (samples, pretrained agent, loss history,
    a return evaluation on the nominal training environment).
    """
    name = "gen-000"
    if name in registry.records():
        _check_snapshot(cfg, registry.path(name))
        log.info("reusing existing %s record", name)
        return load_agent(registry.path(name) / "agent.json")

    case = cfgmod.make_pretrain_case(cfg)
    samples = pretrain.generate_samples(case, cfg["pretrain"]["n_samples"],
                                        seed=cfg["seed"], workers=workers)
    agent = cfgmod.make_agent(
        cfg, np.random.default_rng([cfg["seed"], _SEED_AGENT]))
    hist = pretrain.pretrain_networks(
        samples, agent.policy.mean_net, agent.value,
        action_scale=agent.policy.action_scale,
        epochs=cfg["pretrain"]["epochs"], lr=cfg["pretrain"]["lr"])

    pc = cfgmod.make_ppo_config(cfg)
    env = cfgmod.nominal_env_builder(cfg)(agent.design)
    res = ppo.evaluate(env, agent, cfg["lifecycle"]["eval_rollouts"],
                       cfg["lifecycle"]["eval_horizon"],
                       seed=_seed(cfg, _SEED_EVAL_NOMINAL),
                       gamma=pc.gamma, x0_low=pc.x0_low, x0_high=pc.x0_high)

    d = registry.create(name)
    cfgmod.save_config(cfg, d / "config.yaml")
    pretrain.save_samples(samples, d / "samples.csv", d / "samples.json")
    save_agent(agent, d / "agent.json")
    _pretrain_history_csv(d / "history.csv", hist)
    registry.finalize(name, {
        "samples": len(samples),
        "final_mean_loss": hist["mean_loss"][-1] if hist["mean_loss"] else None,
        "final_value_loss": hist["value_loss"][-1] if hist["value_loss"] else None,
        "nominal": {"mean": res.mean, "std": res.std, "n": len(res.returns)},
        "design": list(agent.design.values),
    })
    return agent


def _gen_name(g: int) -> str:
    return f"gen-{g:03d}"


def run_codesign(cfg: dict, registry: Registry, agent: ppo.Agent, generation: int,
                 env_builder, *, epochs: int | None = None, seed: int,
                 refs: dict | None = None) -> ppo.TrainingHistory:
    """One co-design optimization producing the given generation's record.

    Mutates ``agent`` in place (policy, value, design). With epochs=0 the
    record is an exact restatement of the starting agent.
    """
    name = _gen_name(generation)
    pc = cfgmod.make_ppo_config(cfg, epochs=epochs, seed=seed)
    hist = ppo.train(agent, env_builder, pc)

    env = env_builder(agent.design)
    res = ppo.evaluate(env, agent, cfg["lifecycle"]["eval_rollouts"],
                       cfg["lifecycle"]["eval_horizon"],
                       seed=_seed(cfg, _SEED_EVAL_NOMINAL),
                       gamma=pc.gamma, x0_low=pc.x0_low, x0_high=pc.x0_high)

    d = registry.create(name)
    cfgmod.save_config(cfg, d / "config.yaml")
    save_agent(agent, d / "agent.json")
    hist.to_csv(d / "history.csv")
    tail = hist.avg_return[-min(100, len(hist.avg_return)):]
    registry.finalize(name, {
        "epochs": len(hist.avg_return),
        "aborted": hist.aborted,
        "dropped": hist.dropped,
        "design": list(agent.design.values),
        "avg_return_tail": float(np.mean(tail)) if tail else None,
        "train_env": {"mean": res.mean, "std": res.std, "n": len(res.returns)},
    }, refs=refs)
    return hist


def run_deploy(cfg: dict, registry: Registry, agent: ppo.Agent,
               generation: int):
    """Step 2: deploy on the hidden truth plant and collect residual data.

    Runs deploy_epochs x deploy_episodes_per_epoch episodes with the design
    frozen, fine-tuning the policy online unless lifecycle.fine_tune is off
    (then the same loop runs at lr 0, purely collecting data). Returns
    (fine-tuned agent, residual dataset, flagged).
    """
    lc = cfg["lifecycle"]
    dep_name = f"deploy-{generation:03d}"
    if dep_name in registry.records():
        log.info("reusing existing %s record", dep_name)
        deployed = load_agent(registry.path(dep_name) / "agent.json")
        ds = disc.load_residuals(registry.path(dep_name) / "residuals.csv")
        flagged = registry.manifest(dep_name)["stats"]["flagged"]
        return deployed, ds, flagged

    if cfg["case"] == "suspension":
        series = cfgmod.disturbance_series(cfg, seed=_seed(cfg, _SEED_ROAD))
        base_builder = cfgmod.truth_env_builder(cfg, series)
        n_ep, h = lc["deploy_episodes_per_epoch"], lc["deploy_horizon"]
        epoch_counter = [0]

        def env_builder(design: dyn.DesignParams):
            # walk the road series in consecutive windows, one per episode
            env = base_builder(design)
            starts = (np.arange(n_ep) + epoch_counter[0] * n_ep) * h
            env.set_start_steps(starts % series.size)
            epoch_counter[0] += 1
            return env
    else:
        env_builder = cfgmod.truth_env_builder(cfg)

    deployed = agent.copy()
    pc = dataclasses.replace(
        cfgmod.make_ppo_config(cfg, seed=_seed(cfg, _SEED_DEPLOY),
                               epochs=lc["deploy_epochs"], train_design=False),
        lr=cfg["ppo"]["lr"] if lc["fine_tune"] else 0.0,
        episodes_per_epoch=lc["deploy_episodes_per_epoch"],
        horizon=lc["deploy_horizon"])
    episodes: list[sim.Episode] = []
    hist = ppo.train(deployed, env_builder, pc, episode_sink=episodes)

    blown = sum(ep.terminated_early for ep in episodes)
    frac = blown / max(1, len(episodes))
    flagged = frac > BLOWUP_FLAG_FRACTION
    if flagged:
        log.warning("deployment blow-up fraction %.1f%% exceeds %.0f%%; "
                    "data kept but the run is flagged",
                    100 * frac, 100 * BLOWUP_FLAG_FRACTION)

    plant = cfgmod.plant_builder(cfg)(agent.design.values)
    ds = disc.build_residuals(episodes, plant,
                              mode=cfg["discrepancy"]["residual_mode"])

    d = registry.create(dep_name)
    save_agent(deployed, d / "agent.json")
    disc.save_residuals(ds, d / "residuals.csv")
    hist.to_csv(d / "history.csv")
    registry.finalize(dep_name, {
        "episodes": len(episodes),
        "records": len(ds),
        "blowup_fraction": frac,
        "flagged": flagged,
        "fine_tune": bool(lc["fine_tune"]),
        "design": list(deployed.design.values),
    }, refs={"parent": _gen_name(generation)})
    return deployed, ds, flagged


def run_fit(cfg: dict, registry: Registry, generation: int,
            ds: disc.ResidualDataset | None = None) -> disc.FitResult:
    """Fit the quantile discrepancy model from a deployment's residuals.

    With ds=None the dataset is read back from the deployment record.
    Persists the model-NNN record with validation-split diagnostics.
    """
    dep_name = f"deploy-{generation:03d}"
    mod_name = f"model-{generation:03d}"
    if mod_name in registry.records():
        log.info("reusing existing %s record", mod_name)
        model = disc.QuantileModel.load(registry.path(mod_name) / "quantile.json")
        return disc.FitResult(
            model=model,
            val_rmse_median=registry.manifest(mod_name)["stats"]["val_rmse_median"],
            train_losses=[], val_losses=[])
    if ds is None:
        ds = disc.load_residuals(registry.path(dep_name) / "residuals.csv")

    model = disc.QuantileModel.fresh(
        cfgmod.state_dim(cfg),
        np.random.default_rng([cfg["seed"], _SEED_FIT]),
        hidden=tuple(cfg["discrepancy"]["hidden"]))
    fitres = disc.fit(ds, model, epochs=cfg["discrepancy"]["epochs"],
                      lr=cfg["discrepancy"]["lr"],
                      val_fraction=cfg["discrepancy"]["val_fraction"],
                      seed=_seed(cfg, _SEED_FIT))
    _, val_mask = disc.split_by_episode(ds, cfg["discrepancy"]["val_fraction"],
                                        seed=_seed(cfg, _SEED_FIT))
    cov = disc.coverage(ds, fitres.model, val_mask) if val_mask.any() else None

    d = registry.create(mod_name)
    fitres.model.save(d / "quantile.json")
    _fit_history_csv(d / "history.csv", fitres)
    registry.finalize(mod_name, {
        "val_rmse_median": fitres.val_rmse_median,
        "val_coverage": cov,
        "epochs": len(fitres.train_losses),
        "residual_mode": cfg["discrepancy"]["residual_mode"],
    }, refs={"residuals": dep_name})
    return fitres


# -- evaluation -------------------------------------------------------------------

def sigma_ss(episode: sim.Episode, window: int) -> dict:
    """Steady-state response spread over the trailing window of an episode.

    Population standard deviation of the third and fourth state components
    and of the input over the last ``window`` steps (fewer if the episode
    terminated early).
    """
    w = min(window, len(episode))
    tail_x = episode.states[-w:]
    tail_u = episode.actions[-w:]
    return {"x3": float(np.std(tail_x[:, 2])),
            "x4": float(np.std(tail_x[:, 3])),
            "u": float(np.std(tail_u)),
            "steps": len(episode)}


def evaluate_generations(cfg: dict, agents: dict[int, ppo.Agent],
                         zdot_series: np.ndarray | None = None):
    """Paired truth-plant comparison of generation policies.

    Every generation is evaluated under the same seed, so all face identical
    initial states and disturbance realizations. For the suspension the
    canonical initial conditions additionally yield per-condition trajectories
    and steady-state response spreads. Returns (stats, trajectories) where
    trajectories maps (generation, condition index) to an Episode.
    """
    lc = cfg["lifecycle"]
    if cfg["case"] == "suspension" and zdot_series is None:
        zdot_series = cfgmod.disturbance_series(cfg, seed=_seed(cfg, _SEED_ROAD))
    builder = cfgmod.truth_env_builder(cfg, zdot_series)
    pc = cfgmod.make_ppo_config(cfg)

    stats = {"case": cfg["case"], "rollouts": lc["eval_rollouts"],
             "horizon": lc["eval_horizon"], "returns": {}}
    trajectories: dict[tuple[int, int], sim.Episode] = {}
    for g in sorted(agents):
        agent = agents[g]
        env = builder(agent.design)
        res = ppo.evaluate(env, agent, lc["eval_rollouts"], lc["eval_horizon"],
                           seed=_seed(cfg, _SEED_EVAL_TRUTH), gamma=pc.gamma,
                           x0_low=pc.x0_low, x0_high=pc.x0_high)
        stats["returns"][str(g)] = {"mean": res.mean, "std": res.std,
                                    "n": len(res.returns),
                                    "design": list(agent.design.values)}

    gens = sorted(agents)
    if len(gens) >= 2:
        comp = {}
        for a, b in zip(gens[:-1], gens[1:]):
            ra = stats["returns"][str(a)]
            rb = stats["returns"][str(b)]
            comp[f"{b}_vs_{a}"] = {
                "mean_delta": rb["mean"] - ra["mean"],
                "std_ratio": rb["std"] / ra["std"] if ra["std"] else float("inf"),
            }
        stats["comparison"] = comp

    if cfg["case"] == "suspension":
        ics = np.array(lc["canonical_ics"], dtype=np.float64)
        stats["sigma_ss"] = {}
        for g in gens:
            agent = agents[g]
            env = builder(agent.design)
            eps = sim.rollout_batch(
                env, agent, ics, lc["eval_horizon"],
                rng=np.random.default_rng([_seed(cfg, _SEED_EVAL_TRAJ), 3]),
                env_rng=np.random.default_rng([_seed(cfg, _SEED_EVAL_TRAJ), 2]))
            stats["sigma_ss"][str(g)] = [
                sigma_ss(ep, lc["sigma_ss_window"]) for ep in eps]
            for i, ep in enumerate(eps):
                trajectories[(g, i)] = ep
    return stats, trajectories


def _persist_evaluation(cfg: dict, registry: Registry, stats: dict,
                        trajectories: dict) -> None:
    name = "evaluation"
    if name in registry.records():
        _check_snapshot(cfg, registry.path(name))
        return
    d = registry.create(name)
    cfgmod.save_config(cfg, d / "config.yaml")
    for (g, i), ep in sorted(trajectories.items()):
        sim.episode_to_csv(ep, d / f"traj-gen{g:03d}-ic{i + 1}.csv",
                           design_note=f"generation {g} condition {i + 1}")
    registry.finalize(name, stats,
                      refs={"generations": [_gen_name(g) for g in
                                            sorted({g for g, _ in trajectories})]
                            or None})


# -- full loop --------------------------------------------------------------------

@dataclasses.dataclass
class LifecycleResult:
    registry: Registry
    agents: dict[int, ppo.Agent]
    evaluation: dict | None
    model: disc.QuantileModel | None
    flagged: bool


def run_lifecycle(cfg: dict, out_root, generations: int = 2,
                  workers: int = 1, evaluate: bool = True) -> LifecycleResult:
    """Run the full loop up to the requested number of design generations.

    generations=1 stops after the nominal-model co-design; each further
    generation adds a deployment, a discrepancy fit, and a re-optimization
    under the corrected model. Existing records in ``out_root`` are reused
    when their configuration snapshot matches, so the loop can resume.
    """
    if generations < 1:
        raise ValueError("need at least one generation")
    registry = Registry(out_root)
    registry.root.mkdir(parents=True, exist_ok=True)

    agent0 = run_pretrain(cfg, registry, workers=workers)
    agents: dict[int, ppo.Agent] = {}
    flagged = False
    model = None

    name1 = _gen_name(1)
    if name1 in registry.records():
        _check_snapshot(cfg, registry.path(name1))
        agents[1] = load_agent(registry.path(name1) / "agent.json")
        log.info("reusing existing %s record", name1)
    else:
        agents[1] = agent0.copy()
        run_codesign(cfg, registry, agents[1], 1,
                     cfgmod.nominal_env_builder(cfg),
                     seed=_seed(cfg, _SEED_TRAIN1),
                     refs={"parent": "gen-000"})

    for g in range(2, generations + 1):
        deployed, ds, flag_g = run_deploy(cfg, registry, agents[g - 1],
                                          generation=g - 1)
        fitres = run_fit(cfg, registry, g - 1, ds)
        flagged = flagged or flag_g
        model = fitres.model
        name_g = _gen_name(g)
        if name_g in registry.records():
            _check_snapshot(cfg, registry.path(name_g))
            agents[g] = load_agent(registry.path(name_g) / "agent.json")
            log.info("reusing existing %s record", name_g)
            continue
        step3_epochs = cfg["lifecycle"]["step3_epochs"]
        agents[g] = deployed.copy()
        # Re-arm the exploration branch exactly as the first optimization
        # initialized it. The previous generation's training collapses the
        # std head to ~1e-4, which would leave the re-optimization without
        # usable exploration; mean/value nets and design still warm-start
        # from the deployed agent.
        sigma_bias = cfg["lifecycle"]["step3_sigma_reset"]
        if sigma_bias is not None:
            ppo.constant_std_init(agents[g].policy.std_net, sigma_bias)
        run_codesign(cfg, registry, agents[g], g,
                     corrected_env_builder(cfg, model),
                     epochs=step3_epochs,
                     seed=_seed(cfg, _SEED_TRAIN2) + (g - 2),
                     refs={"parent": _gen_name(g - 1),
                           "model": f"model-{g - 1:03d}"})

    evaluation = None
    if evaluate:
        if "evaluation" in registry.records():
            _check_snapshot(cfg, registry.path("evaluation"))
            evaluation = registry.manifest("evaluation")["stats"]
        else:
            evaluation, trajectories = evaluate_generations(cfg, agents)
            _persist_evaluation(cfg, registry, evaluation, trajectories)
    return LifecycleResult(registry=registry, agents=agents,
                           evaluation=evaluation, model=model, flagged=flagged)
