"""Quantile-regression model of the gap between deployed plant and nominal model.

Residuals e_k = x_k - x_bar_k are extracted from deployment episodes by
propagating the nominal plant open-loop alongside the logged trajectory. A
single network maps (e_k, x_k, u_k) to the 10th/50th/90th percentile of
e_{k+1} per state dimension; the median corrects the nominal model and the
10-90 band width feeds an uncertainty penalty during re-optimization. The
model deliberately takes no design input, so one fitted model serves any
design the next optimization visits.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from . import tensorgrad as tg

log = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.1, 0.5, 0.9)


@dataclass(frozen=True)
class ResidualDataset:
    """Per-step residual transitions with episode bookkeeping.

    Record k holds (e_k, x_k, u_k, e_{k+1}); episode_ids mark which (possibly
    split) episode each record came from, so train/validation splits can stay
    leakage-free.
    """

    e: np.ndarray        # (N, d)
    x: np.ndarray        # (N, d)
    u: np.ndarray        # (N,)
    e_next: np.ndarray   # (N, d)
    episode_ids: np.ndarray  # (N,) int
    mode: str            # "open_loop" or "one_step"

    def __post_init__(self):
        n = self.e.shape[0]
        if not (self.x.shape[0] == self.u.shape[0] == self.e_next.shape[0]
                == self.episode_ids.shape[0] == n):
            raise ValueError("residual arrays disagree on record count")
        if self.e.shape != self.e_next.shape or self.e.shape != self.x.shape:
            raise ValueError("residual arrays disagree on state dimension")

    def __len__(self) -> int:
        return self.e.shape[0]

    @property
    def state_dim(self) -> int:
        return self.e.shape[1]

    def inputs(self) -> np.ndarray:
        return np.hstack([self.e, self.x, self.u[:, None]])


def build_residuals(episodes, plant: dyn.DiscretePlant,
                    mode: str = "open_loop") -> ResidualDataset:
    """Extract residual transitions from truth-plant episodes.

    "open_loop" propagates x_bar by the nominal plant from each episode's
    initial state (x_bar_{k+1} = A x_bar_k + B u_k), so e accumulates along
    the episode; an episode whose nominal propagation blows up is split at
    the divergence point and the remainder restarts from the true state.
    "one_step" resets x_bar to the logged state every step, making e_next
    the pure one-step model gap (e_k is then 0 for every record).
    """
    if mode not in ("open_loop", "one_step"):
        raise ValueError(f"unknown residual mode {mode!r}")
    es, xs, us, ens, ids = [], [], [], [], []
    next_id = 0
    for ep in episodes:
        states, actions = ep.states, ep.actions
        h = actions.shape[0]
        xbar = states[0].copy()
        e = np.zeros_like(xbar)
        splits = 0
        for k in range(h):
            xbar = dyn.step_nominal(plant, xbar, actions[k])
            if not np.all(np.isfinite(xbar)) or \
                    np.max(np.abs(xbar)) > dyn.BLOWUP_LIMIT:
                log.info("nominal propagation diverged at step %d; "
                         "splitting episode", k + 1)
                splits += 1
                next_id += 1
                xbar = states[k + 1].copy()
                e = np.zeros_like(xbar)
                continue
            e_next = states[k + 1] - xbar
            es.append(e.copy())
            xs.append(states[k].copy())
            us.append(float(actions[k]))
            ens.append(e_next)
            ids.append(next_id)
            if mode == "one_step":
                xbar = states[k + 1].copy()
                e = np.zeros_like(xbar)
            else:
                e = e_next
        next_id += 1
    if not es:
        raise ValueError("no residual records could be extracted")
    return ResidualDataset(e=np.array(es), x=np.array(xs), u=np.array(us),
                           e_next=np.array(ens),
                           episode_ids=np.array(ids, dtype=np.int64),
                           mode=mode)


def save_residuals(ds: ResidualDataset, path) -> None:
    d = ds.state_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# residual dataset: mode={ds.mode}\n")
        w = csv.writer(fh)
        w.writerow(["episode"]
                   + [f"e{i+1}" for i in range(d)]
                   + [f"x{i+1}" for i in range(d)] + ["u"]
                   + [f"en{i+1}" for i in range(d)])
        for k in range(len(ds)):
            w.writerow([int(ds.episode_ids[k])]
                       + ["%.17g" % v for v in ds.e[k]]
                       + ["%.17g" % v for v in ds.x[k]]
                       + ["%.17g" % ds.u[k]]
                       + ["%.17g" % v for v in ds.e_next[k]])


def load_residuals(path) -> ResidualDataset:
    with open(path, "r", encoding="utf-8") as fh:
        head = fh.readline()
        if not head.startswith("# residual dataset: mode="):
            raise ValueError("not a residual dataset file")
        mode = head.strip().split("mode=")[1]
        rows = list(csv.reader(fh))
    cols = rows[0]
    if cols[0] != "episode" or (len(cols) - 2) % 3 != 0:
        raise ValueError("malformed residual dataset header")
    d = (len(cols) - 2) // 3
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    return ResidualDataset(
        episode_ids=body[:, 0].astype(np.int64),
        e=body[:, 1:1 + d], x=body[:, 1 + d:1 + 2 * d],
        u=body[:, 1 + 2 * d],
        e_next=body[:, 2 + 2 * d:2 + 3 * d], mode=mode)


def pinball_loss(prediction: np.ndarray, target: np.ndarray,
                 tau: float) -> float:
    """max(tau*(y-yhat), (tau-1)*(y-yhat)) summed over every element."""
    if not (0.0 < tau < 1.0):
        raise ValueError("quantile level must lie in (0, 1)")
    diff = np.asarray(target, dtype=np.float64) - np.asarray(prediction,
                                                             dtype=np.float64)
    return float(np.sum(np.maximum(tau * diff, (tau - 1.0) * diff)))


class QuantileModel:
    """Three-quantile residual predictor over standardized (e, x, u).

    Net output is (n, 3*d) laid out as [lower | median | upper] blocks in
    standardized residual units; predict() destandardizes and applies
    monotone rearrangement (per-dimension sort), which never increases the
    training loss and guarantees lower <= median <= upper.
    """

    def __init__(self, net: tg.Mlp, state_dim: int,
                 in_mean: np.ndarray, in_std: np.ndarray,
                 out_mean: np.ndarray, out_std: np.ndarray,
                 taus=QUANTILE_LEVELS):
        if net.out_dim != 3 * state_dim:
            raise ValueError("net output must hold three quantiles per state")
        self.net = net
        self.state_dim = state_dim
        self.in_mean = np.asarray(in_mean, dtype=np.float64)
        self.in_std = np.asarray(in_std, dtype=np.float64)
        self.out_mean = np.asarray(out_mean, dtype=np.float64)
        self.out_std = np.asarray(out_std, dtype=np.float64)
        self.taus = tuple(float(t) for t in taus)

    @staticmethod
    def fresh(state_dim: int, rng: np.random.Generator,
              hidden=(64, 64)) -> "QuantileModel":
        sizes = [2 * state_dim + 1] + list(hidden) + [3 * state_dim]
        net = tg.Mlp(sizes, rng=rng)  # tanh hidden, linear output
        z = np.zeros(state_dim)
        return QuantileModel(net, state_dim, np.zeros(2 * state_dim + 1),
                             np.ones(2 * state_dim + 1), z, np.ones(state_dim))

    # -- inference ---------------------------------------------------------

    def _standardize_in(self, e, x, u):
        raw = np.hstack([np.atleast_2d(e), np.atleast_2d(x),
                         np.atleast_2d(u).reshape(-1, 1)])
        return (raw - self.in_mean) / self.in_std

    def quantiles_raw(self, e, x, u) -> np.ndarray:
        """(n, 3, d) destandardized quantiles, training head order."""
        z = self.net.forward(self._standardize_in(e, x, u))
        n = z.shape[0]
        q = z.reshape(n, 3, self.state_dim)
        return q * self.out_std + self.out_mean

    def predict(self, e, x, u):
        """(lower, median, upper) after monotone rearrangement; (n, d) each."""
        q = np.sort(self.quantiles_raw(e, x, u), axis=1)
        return q[:, 0, :], q[:, 1, :], q[:, 2, :]

    def predict_taped(self, tape: tg.Tape, bound: tg.BoundMlp, e, x, u):
        """Differentiable predict: same arithmetic on a tape.

        Rearrangement of three channels is composed from min/max so the
        subgradient convention matches the numpy sort on ties.
        """
        zin = self._standardize_in(np.asarray(e), np.asarray(x), np.asarray(u))
        n, d = zin.shape[0], self.state_dim
        out = bound.forward(zin)
        chans = []
        for j in range(3):
            block = tg.slice_cols(out, j * d, (j + 1) * d)
            chans.append(tg.add(tg.mul(block, self.out_std), self.out_mean))
        a, b, c = chans
        lower = tg.minimum(tg.minimum(a, b), c)
        upper = tg.maximum(tg.maximum(a, b), c)
        # middle of three by pure selection, so values (and ties) match the
        # numpy sort in predict() bitwise
        median = tg.maximum(tg.minimum(a, b),
                            tg.minimum(tg.maximum(a, b), c))
        return lower, median, upper

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        f = lambda arr: ["%.17g" % v for v in np.asarray(arr).ravel()]
        return {"format": "ccdtwin-quantile-v1",
                "state_dim": self.state_dim,
                "taus": list(self.taus),
                "net": tg.mlp_to_dict(self.net),
                "in_mean": f(self.in_mean), "in_std": f(self.in_std),
                "out_mean": f(self.out_mean), "out_std": f(self.out_std)}

    @staticmethod
    def from_dict(doc: dict) -> "QuantileModel":
        if doc.get("format") != "ccdtwin-quantile-v1":
            raise ValueError("unrecognized quantile checkpoint format")
        g = lambda key: np.array([float(v) for v in doc[key]])
        return QuantileModel(tg.mlp_from_dict(doc["net"]),
                             int(doc["state_dim"]),
                             g("in_mean"), g("in_std"),
                             g("out_mean"), g("out_std"),
                             taus=tuple(doc["taus"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "QuantileModel":
        with open(path, "r", encoding="utf-8") as fh:
            return QuantileModel.from_dict(json.load(fh))


def split_by_episode(ds: ResidualDataset, val_fraction: float = 0.2,
                     seed: int = 0):
    """Shuffle episode ids, hold out the last fraction; returns index masks."""
    ids = np.unique(ds.episode_ids)
    rng = np.random.default_rng([seed, 17])
    perm = rng.permutation(ids)
    n_val = max(1, int(round(val_fraction * len(ids)))) if len(ids) > 1 else 0
    val_ids = set(perm[len(ids) - n_val:].tolist())
    val_mask = np.array([int(i) in val_ids for i in ds.episode_ids])
    return ~val_mask, val_mask


@dataclass
class FitResult:
    model: QuantileModel
    val_rmse_median: float
    train_losses: list
    val_losses: list


def fit(ds: ResidualDataset, model: QuantileModel, epochs: int = 1500,
        lr: float = 1e-3, val_fraction: float = 0.2, seed: int = 0) -> FitResult:
    """Train by summed pinball loss over the three quantile levels.

    Full-batch Adam on standardized inputs/targets; standardization stats are
    recomputed from the training split (std floored at 1e-12 so a constant
    dimension maps to exact zeros). Divergence beyond 10x the initial loss
    aborts with the best-so-far parameters; the best validation model is
    what is returned in all cases.
    """
    train_mask, val_mask = split_by_episode(ds, val_fraction, seed)
    if train_mask.sum() < 10:
        raise ValueError("need at least 10 training records")
    Xtr_raw = np.hstack([ds.e[train_mask], ds.x[train_mask],
                         ds.u[train_mask][:, None]])
    model.in_mean = Xtr_raw.mean(axis=0)
    model.in_std = np.maximum(Xtr_raw.std(axis=0), 1e-12)
    Etr = ds.e_next[train_mask]
    model.out_mean = Etr.mean(axis=0)
    model.out_std = np.maximum(Etr.std(axis=0), 1e-12)

    Xtr = (Xtr_raw - model.in_mean) / model.in_std
    Ttr = (Etr - model.out_mean) / model.out_std
    n, d = Xtr.shape[0], model.state_dim
    # standardized pinball target blocks, one per quantile head
    T3 = np.concatenate([Ttr, Ttr, Ttr], axis=1)
    tau_row = np.concatenate([np.full(d, t) for t in model.taus])

    opt = tg.Adam(lr)
    best = (float("inf"), model.to_dict())
    initial = None
    train_losses, val_losses = [], []
    for epoch in range(epochs):
        tape = tg.Tape()
        bound = model.net.bind(tape)
        out = bound.forward(Xtr)
        diff = tg.sub(T3, out)
        loss = tg.mean(tg.maximum(tg.mul(diff, tau_row),
                                  tg.mul(diff, tau_row - 1.0)))
        tape.backward(loss)
        params = [v.value for v in bound.vars]
        opt.step(params, bound.grads())
        model.net.set_params(params)

        lv = float(loss.value) * 3 * d  # per-record summed convention
        train_losses.append(lv)
        if initial is None:
            initial = max(lv, 1e-12)
        vl = validation_pinball(ds, model, val_mask)
        val_losses.append(vl)
        score = vl if np.isfinite(vl) else lv  # no validation split: use train
        if score < best[0]:
            best = (score, model.to_dict())
        if not np.isfinite(lv) or lv > 10.0 * initial:
            log.error("quantile fit diverged at epoch %d; keeping best "
                      "checkpoint", epoch)
            break

    restored = QuantileModel.from_dict(best[1])
    model.net = restored.net
    model.in_mean, model.in_std = restored.in_mean, restored.in_std
    model.out_mean, model.out_std = restored.out_mean, restored.out_std
    _, med, _ = model.predict(ds.e[val_mask], ds.x[val_mask], ds.u[val_mask])
    rmse = float(np.sqrt(np.mean((med - ds.e_next[val_mask]) ** 2))) \
        if val_mask.any() else float("nan")
    return FitResult(model=model, val_rmse_median=rmse,
                     train_losses=train_losses, val_losses=val_losses)


def validation_pinball(ds: ResidualDataset, model: QuantileModel,
                       mask: np.ndarray) -> float:
    """Mean summed pinball loss per record on the masked subset."""
    if not mask.any():
        return float("nan")
    q = model.quantiles_raw(ds.e[mask], ds.x[mask], ds.u[mask])
    target = ds.e_next[mask]
    total = 0.0
    for j, t in enumerate(model.taus):
        total += pinball_loss(q[:, j, :], target, t)
    return total / mask.sum()


def coverage(ds: ResidualDataset, model: QuantileModel,
             mask: np.ndarray | None = None) -> float:
    """Fraction of target components inside the rearranged [lower, upper]."""
    if mask is None:
        mask = np.ones(len(ds), dtype=bool)
    lo, _, hi = model.predict(ds.e[mask], ds.x[mask], ds.u[mask])
    t = ds.e_next[mask]
    return float(np.mean((t >= lo) & (t <= hi)))
