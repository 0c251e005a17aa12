"""Joint policy/value/design optimization with a clipped-ratio surrogate.

The physical design vector rides the optimizer as one more leaf: it enters
the policy and value networks as extra input coordinates (normalized to
[0,1] over its bounds), receives gradients through the surrogate loss, and
is projected back into bounds after every update. Episode collection always
uses the current design, so the environment the policy sees co-evolves with
the parameters it is optimizing.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import envsim as sim
from . import tensorgrad as tg

log = logging.getLogger(__name__)


class ValueNet:
    """State-value approximator with a fixed affine output head.

    The head (out_mean, out_std) is set once from pretraining label
    statistics and treated as a constant thereafter; it lets one learning
    rate serve cost scales that differ by orders of magnitude between case
    studies.
    """

    def __init__(self, net: tg.Mlp, out_mean: float = 0.0, out_std: float = 1.0):
        self.net = net
        self.out_mean = float(out_mean)
        self.out_std = float(out_std)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.out_mean + self.out_std * self.net.forward(X).reshape(-1)

    def to_dict(self) -> dict:
        return {"net": tg.mlp_to_dict(self.net),
                "out_mean": "%.17g" % self.out_mean,
                "out_std": "%.17g" % self.out_std}

    @staticmethod
    def from_dict(doc: dict) -> "ValueNet":
        return ValueNet(tg.mlp_from_dict(doc["net"]),
                        float(doc["out_mean"]), float(doc["out_std"]))


class GaussianPolicy:
    """Two-net Gaussian policy: mean and std branches over (x, p_norm).

    Both branches emit actions in units of ``action_scale``; the std branch
    passes through softplus so sigma stays positive. Fresh policies get the
    conventional exploration start: std weights all zero, biases 0.01."""

    def __init__(self, mean_net: tg.Mlp, std_net: tg.Mlp, action_scale: float,
                 u_low: float, u_high: float):
        if mean_net.in_dim != std_net.in_dim:
            raise ValueError("mean and std branches must share the input space")
        self.mean_net = mean_net
        self.std_net = std_net
        self.action_scale = float(action_scale)
        self.u_low = float(u_low)
        self.u_high = float(u_high)

    def mean_std(self, X: np.ndarray):
        mu = self.action_scale * self.mean_net.forward(X).reshape(-1)
        raw = self.std_net.forward(X).reshape(-1)
        sigma = self.action_scale * (np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw))))
        return mu, sigma

    def to_dict(self) -> dict:
        return {"mean_net": tg.mlp_to_dict(self.mean_net),
                "std_net": tg.mlp_to_dict(self.std_net),
                "action_scale": "%.17g" % self.action_scale,
                "u_low": "%.17g" % self.u_low,
                "u_high": "%.17g" % self.u_high}

    @staticmethod
    def from_dict(doc: dict) -> "GaussianPolicy":
        return GaussianPolicy(tg.mlp_from_dict(doc["mean_net"]),
                              tg.mlp_from_dict(doc["std_net"]),
                              float(doc["action_scale"]),
                              float(doc["u_low"]), float(doc["u_high"]))


def constant_std_init(net: tg.Mlp, bias: float = 0.01) -> tg.Mlp:
    """Zero every weight and set every bias to the given constant, making the
    branch output (hence the exploration std) input-independent at start."""
    for w in net.weights:
        w[:] = 0.0
    for b in net.biases:
        b[:] = bias
    return net


class Agent:
    """Policy + value + current design, presented as the rollout protocol.

    Appends the normalized design coordinates to raw states before every
    network call, so envsim only ever hands over plain state batches."""

    def __init__(self, policy: GaussianPolicy, value: ValueNet,
                 design: dyn.DesignParams):
        self.policy = policy
        self.value = value
        self.design = design

    @property
    def design_norm(self) -> np.ndarray:
        return self.design.normalized()

    def _with_design(self, X: np.ndarray) -> np.ndarray:
        z = self.design_norm
        return np.hstack([X, np.broadcast_to(z, (X.shape[0], z.size))])

    def mean_std(self, X: np.ndarray):
        return self.policy.mean_std(self._with_design(X))

    def log_prob_np(self, X: np.ndarray, u: np.ndarray, musig=None) -> np.ndarray:
        mu, sigma = musig if musig is not None else self.mean_std(X)
        return tg.gaussian_log_prob_np(u, mu, sigma)

    def value_batch(self, X: np.ndarray) -> np.ndarray:
        return self.value.predict(self._with_design(X))

    def to_dict(self) -> dict:
        return {"format": "ccdtwin-agent-v1",
                "policy": self.policy.to_dict(),
                "value": self.value.to_dict(),
                "design": {
                    "names": list(self.design.names),
                    "lower": ["%.17g" % v for v in self.design.lower],
                    "upper": ["%.17g" % v for v in self.design.upper],
                    "values": ["%.17g" % v for v in self.design.values],
                }}

    @staticmethod
    def from_dict(doc: dict) -> "Agent":
        if doc.get("format") != "ccdtwin-agent-v1":
            raise ValueError("unrecognized agent checkpoint format")
        dd = doc["design"]
        design = dyn.DesignParams(
            names=tuple(dd["names"]),
            lower=np.array([float(v) for v in dd["lower"]]),
            upper=np.array([float(v) for v in dd["upper"]]),
            values=np.array([float(v) for v in dd["values"]]))
        return Agent(GaussianPolicy.from_dict(doc["policy"]),
                     ValueNet.from_dict(doc["value"]), design)

    def copy(self) -> "Agent":
        return Agent.from_dict(self.to_dict())


def build_agent(design: dyn.DesignParams, state_dim: int, hidden: list[int],
                tanh_flags: list[bool], action_scale: float, u_low: float,
                u_high: float, rng: np.random.Generator,
                std_bias: float = 0.01) -> Agent:
    """Fresh agent: mean/std/value nets over (x, p_norm) inputs."""
    in_dim = state_dim + len(design.names)
    sizes = [in_dim] + list(hidden) + [1]
    flags = list(tanh_flags)
    mean_net = tg.Mlp(sizes, tanh_layers=flags, rng=rng)
    std_net = constant_std_init(tg.Mlp(sizes, tanh_layers=flags, rng=rng), std_bias)
    value_net = tg.Mlp(sizes, tanh_layers=flags, rng=rng)
    return Agent(GaussianPolicy(mean_net, std_net, action_scale, u_low, u_high),
                 ValueNet(value_net), design)


@dataclass(frozen=True)
class PpoConfig:
    epochs: int
    x0_low: np.ndarray
    x0_high: np.ndarray
    clip_eps: float = 0.2
    value_coef: float = 0.5
    lr: float = 1e-5
    episodes_per_epoch: int = 16
    minibatch: int = 256
    update_passes: int = 4
    gamma: float = 0.99
    lam: float = 0.95
    horizon: int = 100
    seed: int = 0
    train_design: bool = True
    pathwise_env_grad: bool = False

    def __post_init__(self):
        object.__setattr__(self, "x0_low", np.asarray(self.x0_low, dtype=np.float64))
        object.__setattr__(self, "x0_high", np.asarray(self.x0_high, dtype=np.float64))
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip ratio width must lie in (0, 1)")
        if self.lr < 0.0:
            raise ValueError("learning rate must be nonnegative")
        if self.epochs < 0 or self.horizon < 1 or self.minibatch < 1:
            raise ValueError("malformed training configuration")


@dataclass
class Minibatch:
    states: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    advantages: np.ndarray
    returns_to_go: np.ndarray


def ppo_loss(tape: tg.Tape, agent: Agent, bound_mean: tg.BoundMlp,
             bound_std: tg.BoundMlp, bound_value: tg.BoundMlp,
             design_var: tg.Var, mb: Minibatch, cfg: PpoConfig,
             plant: dyn.DiscretePlant | None = None,
             reward_spec: sim.RewardSpec | None = None) -> tg.Var:
    """Surrogate loss node for one minibatch.

    loss = -mean(min(rho*A, clip(rho, 1-eps, 1+eps)*A))
           + c_v * mean(SmoothL1(V(x,p), returns_to_go))

    where rho = exp(logp_new - logp_old). The design variable enters through
    the network inputs; with pathwise_env_grad it additionally receives the
    gradient of the mean one-step reward recomputed through the nominal
    transition at the batch states and actions.
    """
    nb = mb.states.shape[0]
    scale = agent.policy.action_scale
    ptile = tg.tile_rows(design_var, nb)
    Xfull = tg.concat_cols([mb.states, ptile])

    mu = tg.mul(tg.reshape(bound_mean.forward(Xfull), (nb,)), scale)
    sigma = tg.mul(tg.softplus(tg.reshape(bound_std.forward(Xfull), (nb,))), scale)
    logp = tg.gaussian_log_prob(mb.actions, mu, sigma)
    ratio = tg.exp(tg.sub(logp, mb.log_probs_old))
    unclipped = tg.mul(ratio, mb.advantages)
    clipped = tg.mul(tg.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps),
                     mb.advantages)
    policy_term = tg.neg(tg.mean(tg.minimum(unclipped, clipped)))

    v_hat = tg.add(tg.mul(tg.reshape(bound_value.forward(Xfull), (nb,)),
                          agent.value.out_std), agent.value.out_mean)
    value_term = tg.mean(tg.smooth_l1(v_hat, mb.returns_to_go))

    loss = tg.add(policy_term, tg.mul(value_term, cfg.value_coef))

    if cfg.pathwise_env_grad:
        if plant is None or reward_spec is None:
            raise ValueError("pathwise term needs the plant and reward spec")
        # the tape leaf is the normalized design; B bindings take raw values
        p_raw = tg.add(tg.mul(design_var, agent.design.span),
                       agent.design.lower)
        x_next = dyn.step_nominal_taped(plant, mb.states, mb.actions,
                                        design_var=p_raw)
        qx = tg.matmul(x_next, reward_spec.Q)
        state_cost = tg.total(tg.mul(qx, x_next))
        r_mean = tg.mul(state_cost, -1.0 / nb)
        loss = tg.add(loss, tg.neg(r_mean))
    return loss


def _finite_rows(batch: sim.TransitionBatch, agent: Agent):
    """Drop transitions whose ratio cannot be formed finitely."""
    logp_new = agent.log_prob_np(batch.states, batch.actions)
    delta = logp_new - batch.log_probs_old
    ok = (np.isfinite(batch.states).all(axis=1) & np.isfinite(batch.actions)
          & np.isfinite(batch.advantages) & np.isfinite(batch.returns_to_go)
          & np.isfinite(delta) & (np.abs(delta) < 700.0))
    return ok


@dataclass
class TrainingHistory:
    design_names: tuple
    avg_return: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    design: list = field(default_factory=list)       # raw values per epoch
    sigma: list = field(default_factory=list)        # mean policy std (raw units)
    clip_fraction: list = field(default_factory=list)
    dropped: int = 0
    aborted: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "avg_return", "loss", "sigma", "clip_fraction"]
                       + [f"p:{n}" for n in self.design_names])
            for i in range(len(self.avg_return)):
                w.writerow([i, "%.17g" % self.avg_return[i],
                            "%.17g" % self.loss[i], "%.17g" % self.sigma[i],
                            "%.17g" % self.clip_fraction[i]]
                           + ["%.17g" % v for v in self.design[i]])


def train(agent: Agent, env_builder, cfg: PpoConfig,
          reward_spec: sim.RewardSpec | None = None,
          episode_sink: list | None = None) -> TrainingHistory:
    """PPO-style training loop updating policy, value, and design jointly.

    env_builder(design) must return a fresh environment built around the
    current design values; it is called once per epoch so the plant tracks
    the design trajectory. Deterministic for a fixed config seed. When
    episode_sink is a list, every collected episode is appended to it in
    rollout order (deployment reuses this loop as its data-gathering pass).
    """
    rng_ep = np.random.default_rng([cfg.seed, 7])
    rng_mb = np.random.default_rng([cfg.seed, 11])
    opt = tg.Adam(cfg.lr)
    hist = TrainingHistory(design_names=tuple(agent.design.names))
    bad_streak = 0
    last_good = agent.to_dict()

    for epoch in range(cfg.epochs):
        env = env_builder(agent.design)
        X0 = sim.sample_box(rng_ep, cfg.x0_low, cfg.x0_high,
                            cfg.episodes_per_epoch)
        episodes = sim.rollout_batch(env, agent, X0, cfg.horizon, rng_ep)
        if episode_sink is not None:
            episode_sink.extend(episodes)
        batch = sim.TransitionBatch.build(episodes, agent.design_norm,
                                          cfg.gamma, cfg.lam)
        keep = _finite_rows(batch, agent)
        hist.dropped += int((~keep).sum())
        if not np.all(keep):
            batch = sim.TransitionBatch(
                states=batch.states[keep], actions=batch.actions[keep],
                log_probs_old=batch.log_probs_old[keep],
                advantages=batch.advantages[keep],
                returns_to_go=batch.returns_to_go[keep],
                design_norm=batch.design_norm,
                raw_adv_mean=batch.raw_adv_mean, raw_adv_std=batch.raw_adv_std)

        n = len(batch)
        losses, clipped_n = [], 0
        plant = getattr(env, "plant", None)
        for _ in range(cfg.update_passes):
            order = rng_mb.permutation(n)
            for lo in range(0, n, cfg.minibatch):
                sel = order[lo:lo + cfg.minibatch]
                mb = Minibatch(states=batch.states[sel],
                               actions=batch.actions[sel],
                               log_probs_old=batch.log_probs_old[sel],
                               advantages=batch.advantages[sel],
                               returns_to_go=batch.returns_to_go[sel])
                tape = tg.Tape()
                bm = agent.policy.mean_net.bind(tape)
                bs = agent.policy.std_net.bind(tape)
                bv = agent.value.net.bind(tape)
                pnorm = agent.design.normalized()
                pvar = tape.leaf(pnorm)
                loss = ppo_loss(tape, agent, bm, bs, bv, pvar, mb, cfg,
                                plant=plant, reward_spec=reward_spec)
                tape.backward(loss)

                params = ([v.value for v in bm.vars] + [v.value for v in bs.vars]
                          + [v.value for v in bv.vars])
                grads = bm.grads() + bs.grads() + bv.grads()
                params.append(pnorm)
                grads.append(pvar.grad if cfg.train_design
                             else np.zeros_like(pnorm))
                opt.step(params, grads)
                agent.policy.mean_net.set_params(params[0:len(bm.vars)])
                agent.policy.std_net.set_params(
                    params[len(bm.vars):len(bm.vars) + len(bs.vars)])
                agent.value.net.set_params(
                    params[len(bm.vars) + len(bs.vars):-1])
                agent.design = agent.design.with_normalized(pnorm)
                losses.append(float(loss.value))

                mu, sg = agent.mean_std(mb.states)
                rho = np.exp(agent.log_prob_np(mb.states, mb.actions, (mu, sg))
                             - mb.log_probs_old)
                clipped_n += int(np.sum((rho < 1.0 - cfg.clip_eps)
                                        | (rho > 1.0 + cfg.clip_eps)))

        returns = [sim.discounted_return(ep.rewards, cfg.gamma)
                   for ep in episodes]
        hist.avg_return.append(float(np.mean(returns)))
        hist.loss.append(float(np.mean(losses)) if losses else float("nan"))
        hist.design.append(np.array(agent.design.values))
        if n:
            _, sg = agent.mean_std(batch.states[: min(64, n)])
            hist.sigma.append(float(np.mean(sg)))
        else:
            hist.sigma.append(float("nan"))
        hist.clip_fraction.append(clipped_n / max(1, n * cfg.update_passes))

        if losses and np.isfinite(losses).all():
            bad_streak = 0
            last_good = agent.to_dict()
        else:
            bad_streak += 1
            if bad_streak >= 10:
                log.error("sustained non-finite losses; restoring last good "
                          "state at epoch %d", epoch)
                restored = Agent.from_dict(last_good)
                agent.policy = restored.policy
                agent.value = restored.value
                agent.design = restored.design
                hist.aborted = True
                break
    return hist


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray
    episodes: list


def evaluate(env, agent: Agent, n_rollouts: int, horizon: int, seed: int,
             gamma: float = 0.99, x0_low=None, x0_high=None,
             X0: np.ndarray | None = None, mode: str = "sample",
             keep_episodes: int = 0) -> EvalResult:
    """Monte Carlo return statistics over independent rollouts.

    Initial states come from X0 (cycled) when given, else uniform from the
    box. Environment randomness and action sampling run on separate streams
    derived from the seed, so two agents evaluated with the same seed face
    identical initial states and disturbance draws (paired comparison).
    """
    rng_x0 = np.random.default_rng([seed, 1])
    env_rng = np.random.default_rng([seed, 2])
    act_rng = np.random.default_rng([seed, 3])

    returns = np.empty(n_rollouts)
    kept = []
    done = 0
    batch_cap = 200
    while done < n_rollouts:
        nb = min(batch_cap, n_rollouts - done)
        if X0 is not None:
            idx = (done + np.arange(nb)) % X0.shape[0]
            starts = np.asarray(X0, dtype=np.float64)[idx]
        else:
            starts = sim.sample_box(rng_x0, x0_low, x0_high, nb)
        eps = sim.rollout_batch(env, agent, starts, horizon, act_rng,
                                mode=mode, env_rng=env_rng)
        for i, ep in enumerate(eps):
            returns[done + i] = sim.discounted_return(ep.rewards, gamma)
            if len(kept) < keep_episodes:
                kept.append(ep)
        done += nb
    return EvalResult(mean=float(np.mean(returns)), std=float(np.std(returns)),
                      returns=returns, episodes=kept)
