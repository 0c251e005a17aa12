"""Episode simulation: reward bookkeeping, batched rollouts, GAE.

Environments advance a batch of concurrent episodes one control period at a
time. The rollout driver owns the visible state trajectory; environments own
whatever hidden state they carry (road position, internal residual). Rewards
are always computed from the post-step state and the executed action, so the
stored tuples satisfy rewards[k] == reward(states[k+1], actions[k]) exactly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardSpec:
    """Quadratic stage reward r = -x'Qx - r_u u^2 [- dq'(Q_q)dq].

    The optional quantile-width penalty applies only in corrected-model
    training; Q_q is conventionally 0.1*Q there.
    """

    Q: np.ndarray
    r_u: float
    Q_q: np.ndarray | None = None

    def reward(self, x_next: np.ndarray, u, width=None) -> np.ndarray:
        x = np.asarray(x_next, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        U = np.atleast_1d(np.asarray(u, dtype=np.float64))
        r = -np.einsum("ni,ij,nj->n", X, self.Q, X) - self.r_u * U * U
        if width is not None:
            if self.Q_q is None:
                raise ValueError("width penalty supplied but Q_q is not configured")
            W = np.asarray(width, dtype=np.float64)
            W = W[None, :] if W.ndim == 1 else W
            r = r - np.einsum("ni,ij,nj->n", W, self.Q_q, W)
        return float(r[0]) if single else r


@dataclass
class Episode:
    """One trajectory. len(states) == len(actions) + 1 == len(rewards) + 1;
    values carries one entry per state including the bootstrap."""

    states: np.ndarray      # (H+1, d)
    actions: np.ndarray     # (H,)
    rewards: np.ndarray     # (H,)
    log_probs: np.ndarray   # (H,)
    values: np.ndarray      # (H+1,)
    clip_active: np.ndarray  # (H,) bool
    widths: np.ndarray | None = None  # (H, d) quantile band widths
    terminated_early: bool = False

    def __len__(self) -> int:
        return self.actions.shape[0]

    def check(self) -> None:
        h = len(self)
        if not (self.states.shape[0] == h + 1 == self.rewards.shape[0] + 1
                == self.log_probs.shape[0] + 1 == self.values.shape[0]):
            raise ValueError("episode array lengths are inconsistent")


def discounted_return(rewards: np.ndarray, gamma: float) -> float:
    k = np.arange(len(rewards))
    return float(np.sum((gamma ** k) * rewards))


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float):
    """Generalized advantage estimation.

    delta_k = r_k + gamma V_{k+1} - V_k; A_k = sum_i (gamma lam)^i delta_{k+i};
    returns_to_go = A + V[:-1]. lam = 0 reduces to the one-step TD residual,
    lam = 1 to the discounted Monte-Carlo residual against V.
    """
    h = len(rewards)
    deltas = rewards + gamma * values[1:] - values[:-1]
    adv = np.empty(h)
    acc = 0.0
    gl = gamma * lam
    for k in range(h - 1, -1, -1):
        acc = deltas[k] + gl * acc
        adv[k] = acc
    return adv, adv + values[:-1]


# -- environments ---------------------------------------------------------------

class NominalEnv:
    """Deterministic design model plus an additive disturbance sampler."""

    def __init__(self, plant: dyn.DiscretePlant, reward_spec: RewardSpec,
                 u_low: float, u_high: float, w_sampler=None):
        self.plant = plant
        self.reward_spec = reward_spec
        self.u_low = float(u_low)
        self.u_high = float(u_high)
        self.w_sampler = w_sampler
        self._rng = None

    @property
    def state_dim(self) -> int:
        return self.plant.state_dim

    def begin(self, X0: np.ndarray, rng: np.random.Generator) -> None:
        self._rng = rng

    def step(self, X: np.ndarray, U: np.ndarray):
        w = self.w_sampler(self._rng, X.shape[0]) if self.w_sampler is not None else None
        X1 = dyn.step_nominal(self.plant, X, U, w)
        return X1, None, None


def gaussian_state_noise(std: np.ndarray):
    """Disturbance sampler: w ~ N(0, diag(std^2)) directly in state space."""
    std = np.asarray(std, dtype=np.float64)

    def sampler(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, std.size)) * std

    return sampler


def mapped_scalar_noise(column: np.ndarray, std: float):
    """Disturbance sampler: w = column * xi, xi ~ N(0, std^2) per episode-step."""
    column = np.asarray(column, dtype=np.float64)

    def sampler(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal(n)[:, None] * (column * std)

    return sampler


class TruthIllustrativeEnv:
    """Hidden truth for the benchmark plant (bias, noise, nonlinear terms)."""

    def __init__(self, plant: dyn.DiscretePlant, reward_spec: RewardSpec,
                 u_low: float, u_high: float,
                 gap: dyn.IllustrativeGap = dyn.IllustrativeGap()):
        self.plant = plant
        self.reward_spec = reward_spec
        self.u_low = float(u_low)
        self.u_high = float(u_high)
        self.gap = gap
        self._rng = None

    @property
    def state_dim(self) -> int:
        return self.plant.state_dim

    def begin(self, X0: np.ndarray, rng: np.random.Generator) -> None:
        self._rng = rng

    def step(self, X: np.ndarray, U: np.ndarray):
        X1 = dyn.step_truth_illustrative(self.plant, X, U, self._rng, self.gap)
        blown = np.max(np.abs(X1), axis=1) > dyn.BLOWUP_LIMIT
        return X1, None, (blown if np.any(blown) else None)


class TruthSuspensionEnv:
    """Nonlinear quarter-car truth driven by a road/speed disturbance series.

    Each episode rides a window of the precomputed zdot0 series; window start
    indices are drawn from the begin() rng unless pinned via set_start_steps
    (used for sequential deployment).
    """

    def __init__(self, truth: dyn.SuspensionTruth, reward_spec: RewardSpec,
                 u_low: float, u_high: float, zdot_series: np.ndarray):
        self.truth = truth
        self.reward_spec = reward_spec
        self.u_low = float(u_low)
        self.u_high = float(u_high)
        self.zdot_series = np.asarray(zdot_series, dtype=np.float64)
        self._starts = None
        self._pinned = None
        self._k = 0

    @property
    def state_dim(self) -> int:
        return 4

    def set_start_steps(self, starts: np.ndarray) -> None:
        self._pinned = np.asarray(starts, dtype=np.int64)

    def begin(self, X0: np.ndarray, rng: np.random.Generator) -> None:
        n = X0.shape[0]
        if self._pinned is not None:
            if self._pinned.size != n:
                raise ValueError("pinned start count does not match batch size")
            self._starts = self._pinned
            self._pinned = None
        else:
            self._starts = rng.integers(0, self.zdot_series.size, size=n)
        self._k = 0

    def step(self, X: np.ndarray, U: np.ndarray):
        idx = (self._starts + self._k) % self.zdot_series.size
        z = self.zdot_series[idx]
        self._k += 1
        X1, blown = dyn.step_truth_suspension(self.truth, X, U, z)
        return X1, None, (blown if np.any(blown) else None)


# -- rollout --------------------------------------------------------------------

def rollout_batch(env, policy, X0: np.ndarray, horizon: int,
                  rng: np.random.Generator, mode: str = "sample",
                  env_rng: np.random.Generator | None = None) -> list[Episode]:
    """Advance a batch of episodes under the policy; returns one Episode each.

    mode "sample" draws actions from the policy distribution, "mean" uses the
    distribution mean. Actions are clipped to the env input box before
    execution; stored log-probs refer to the executed (clipped) action so a
    later recompute from the snapshot parameters reproduces them bitwise.
    Early-terminated episodes are truncated and their bootstrap value set to
    zero (absorbing failure). When ``env_rng`` is given the environment draws
    from it instead of ``rng``, decoupling disturbance realizations from
    action sampling so different policies can face identical noise.
    """
    if mode not in ("sample", "mean"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    n, d = X0.shape
    X = np.array(X0, dtype=np.float64)
    env.begin(X, env_rng if env_rng is not None else rng)

    states = np.empty((horizon + 1, n, d))
    actions = np.empty((horizon, n))
    rewards = np.empty((horizon, n))
    logps = np.empty((horizon, n))
    clipped = np.zeros((horizon, n), dtype=bool)
    widths = None
    alive = np.ones(n, dtype=bool)
    end = np.full(n, horizon, dtype=np.int64)

    states[0] = X
    clip_events = 0
    for k in range(horizon):
        mu, sigma = policy.mean_std(X)
        if mode == "sample":
            raw = mu + sigma * rng.standard_normal(n)
        else:
            raw = mu
        u = np.clip(raw, env.u_low, env.u_high)
        was_clipped = raw != u
        clip_events += int(np.sum(was_clipped & alive))
        logp = policy.log_prob_np(X, u, musig=(mu, sigma))

        X1, w, blown = env.step(X, u)
        r = env.reward_spec.reward(X1, u, w)
        if w is not None and widths is None:
            widths = np.zeros((horizon, n, d))
        actions[k], rewards[k], logps[k], clipped[k] = u, r, logp, was_clipped
        if widths is not None:
            widths[k] = w
        states[k + 1] = X1
        if blown is not None:
            newly = blown & alive
            if np.any(newly):
                end[newly] = k + 1
                alive = alive & ~blown
        X = X1
        if not np.any(alive):
            states[k + 2:] = X1
            break

    if clip_events:
        log.debug("action clipping active on %d transition(s)", clip_events)

    # value estimates in one batched pass over every visited state
    flat = states.reshape(-1, d)
    values = policy.value_batch(flat).reshape(horizon + 1, n)

    episodes = []
    for i in range(n):
        h = int(end[i])
        v = values[:h + 1, i].copy()
        early = h < horizon
        if early:
            v[h] = 0.0  # absorbing failure: no bootstrap beyond a blow-up
        ep = Episode(
            states=states[:h + 1, i].copy(),
            actions=actions[:h, i].copy(),
            rewards=rewards[:h, i].copy(),
            log_probs=logps[:h, i].copy(),
            values=v,
            clip_active=clipped[:h, i].copy(),
            widths=widths[:h, i].copy() if widths is not None else None,
            terminated_early=early,
        )
        ep.check()
        episodes.append(ep)
    return episodes


def rollout(env, policy, x0: np.ndarray, horizon: int,
            rng: np.random.Generator, mode: str = "sample") -> Episode:
    """Single-episode convenience wrapper over the batched driver."""
    return rollout_batch(env, policy, np.asarray(x0, dtype=np.float64)[None, :],
                         horizon, rng, mode)[0]


@dataclass
class TransitionBatch:
    """Flattened training batch with normalized advantages."""

    states: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    advantages: np.ndarray
    returns_to_go: np.ndarray
    design_norm: np.ndarray
    raw_adv_mean: float
    raw_adv_std: float

    @staticmethod
    def build(episodes: list[Episode], design_norm: np.ndarray,
              gamma: float, lam: float, normalize: bool = True) -> "TransitionBatch":
        xs, us, lps, advs, rets = [], [], [], [], []
        for ep in episodes:
            adv, ret = compute_gae(ep.rewards, ep.values, gamma, lam)
            xs.append(ep.states[:-1])
            us.append(ep.actions)
            lps.append(ep.log_probs)
            advs.append(adv)
            rets.append(ret)
        adv = np.concatenate(advs)
        mean = float(np.mean(adv))
        std = float(np.std(adv))
        if normalize:
            adv = (adv - mean) / max(std, 1e-12)
        return TransitionBatch(
            states=np.concatenate(xs, axis=0),
            actions=np.concatenate(us),
            log_probs_old=np.concatenate(lps),
            advantages=adv,
            returns_to_go=np.concatenate(rets),
            design_norm=np.array(design_norm, dtype=np.float64),
            raw_adv_mean=mean,
            raw_adv_std=std,
        )

    def __len__(self) -> int:
        return self.actions.shape[0]


def sample_box(rng: np.random.Generator, lower, upper, n: int) -> np.ndarray:
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    return rng.uniform(lower, upper, size=(n, lower.size))


def episode_to_csv(ep: Episode, path, design_note: str = "") -> None:
    """One row per step (t, x..., u, r, logp, V) plus a terminal-state row."""
    d = ep.states.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if design_note:
            fh.write(f"# {design_note}\n")
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + ["u", "r", "logp", "V"])
        for k in range(len(ep)):
            w.writerow([k] + ["%.17g" % v for v in ep.states[k]]
                       + ["%.17g" % ep.actions[k], "%.17g" % ep.rewards[k],
                          "%.17g" % ep.log_probs[k], "%.17g" % ep.values[k]])
        k = len(ep)
        w.writerow([k] + ["%.17g" % v for v in ep.states[k]]
                   + ["", "", "", "%.17g" % ep.values[k]])
