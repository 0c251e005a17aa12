"""Initialization stage: space-filling sampling, feasibility screening,
finite-horizon constrained optimal-control labeling, and supervised net
pretraining.

The screen replaces exact controllable-set computation with an N-step
constrained quadratic program: a state is accepted when the solver finds an
input sequence that keeps the trajectory inside the state box, respects the
input box, and lands the terminal state inside a small tolerance box. The
labeling problem shares the same constraints and adds the quadratic stage
cost with an infinite-horizon Riccati terminal weight, so the first input of
the optimizer doubles as the training label.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import dynamics as dyn

log = logging.getLogger(__name__)


def latin_hypercube(rng: np.random.Generator, n: int, lower, upper) -> np.ndarray:
    """n points in the box with exact per-dimension stratification: each of
    the n equal-width strata of every coordinate holds exactly one point."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if n < 1:
        raise ValueError("need at least one sample")
    if lower.shape != upper.shape or np.any(upper < lower):
        raise ValueError("malformed bounds")
    out = np.empty((n, lower.size))
    for j in range(lower.size):
        strata = rng.permutation(n) + rng.uniform(0.0, 1.0, size=n)
        out[:, j] = lower[j] + (upper[j] - lower[j]) * strata / n
    return out


def riccati_terminal_weight(A: np.ndarray, B: np.ndarray, Q: np.ndarray,
                            r_u: float, tol: float = 1e-12,
                            max_iter: int = 200000):
    """Fixed-point iteration for the discrete-time infinite-horizon weight P
    and feedback gain K (u = -K x). Converges for stabilizable (A, B)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64).reshape(A.shape[0], -1)
    R = np.atleast_2d(np.asarray(r_u, dtype=np.float64))
    P = np.array(Q, dtype=np.float64)
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        Pn = Q + A.T @ P @ (A - B @ K)
        Pn = 0.5 * (Pn + Pn.T)
        if np.max(np.abs(Pn - P)) <= tol * (1.0 + np.max(np.abs(Pn))):
            BtP = B.T @ Pn
            K = np.linalg.solve(R + BtP @ B, BtP @ A)
            return Pn, K
        P = Pn
    raise RuntimeError("Riccati iteration did not converge; (A, B) may not be stabilizable")


@dataclass(frozen=True)
class FeasibilityProblem:
    """N-step constrained problem defining both the screen and the label."""

    horizon: int
    x_low: np.ndarray
    x_high: np.ndarray
    u_low: float
    u_high: float
    terminal_tol: float
    Q: np.ndarray
    r_u: float

    def __post_init__(self):
        object.__setattr__(self, "x_low", np.asarray(self.x_low, dtype=np.float64))
        object.__setattr__(self, "x_high", np.asarray(self.x_high, dtype=np.float64))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=np.float64))
        if self.horizon < 1 or self.terminal_tol <= 0 or self.u_high <= self.u_low:
            raise ValueError("malformed feasibility problem")


@dataclass
class CondensedQP:
    """Dense condensed form of the N-step problem for one plant.

    Decision variable is the input sequence U (N,); stacked states obey
    X = Phi x0 + Gamma U. Objective 0.5 U'HU + f(x0)'U + const(x0) carries the
    stage cost for k=0..N-1 plus the Riccati terminal weight; C U is bounded
    by the input box rows followed by per-step state box rows (terminal step
    uses the tolerance box).
    """

    plant: dyn.DiscretePlant
    problem: FeasibilityProblem
    H: np.ndarray
    W: np.ndarray
    const_M: np.ndarray
    C: np.ndarray
    CtC: np.ndarray
    Phi: np.ndarray
    Gamma: np.ndarray
    lo_stack: np.ndarray
    hi_stack: np.ndarray
    P_term: np.ndarray
    K: np.ndarray

    def bounds_for(self, X0: np.ndarray):
        """Constraint bounds and linear cost for a batch of initial states.

        X0 is (nb, d); returns f (N, nb), l and u ((N + N*d), nb)."""
        pb = self.problem
        N = pb.horizon
        PhiX = self.Phi @ X0.T                       # (N*d, nb)
        f = 2.0 * (self.W @ X0.T)                    # (N, nb)
        nb = X0.shape[0]
        lo = np.empty((N + self.lo_stack.size, nb))
        hi = np.empty_like(lo)
        lo[:N] = pb.u_low
        hi[:N] = pb.u_high
        lo[N:] = self.lo_stack[:, None] - PhiX
        hi[N:] = self.hi_stack[:, None] - PhiX
        return f, lo, hi

    def cost(self, x0: np.ndarray, U: np.ndarray) -> float:
        f = 2.0 * (self.W @ x0)
        return float(0.5 * U @ self.H @ U + f @ U + x0 @ self.const_M @ x0)


def condense(plant: dyn.DiscretePlant, problem: FeasibilityProblem) -> CondensedQP:
    A, B = plant.A, plant.B.reshape(-1)
    d = plant.state_dim
    N = problem.horizon
    P, K = riccati_terminal_weight(A, B, problem.Q, problem.r_u)

    powers = [np.eye(d)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    Phi = np.vstack(powers[1:N + 1])                 # (N*d, d)
    Gamma = np.zeros((N * d, N))
    for k in range(1, N + 1):
        for j in range(k):
            Gamma[(k - 1) * d:k * d, j] = powers[k - 1 - j] @ B

    def weight_rows(M):
        out = np.empty_like(M)
        for k in range(N):
            Wk = problem.Q if k < N - 1 else P
            out[k * d:(k + 1) * d] = Wk @ M[k * d:(k + 1) * d]
        return out

    QGamma = weight_rows(Gamma)
    QPhi = weight_rows(Phi)
    H = 2.0 * (Gamma.T @ QGamma + problem.r_u * np.eye(N))
    H = 0.5 * (H + H.T)
    W = QGamma.T @ Phi                               # Gamma' Qbar Phi, (N, d)
    const_M = problem.Q + Phi.T @ QPhi

    C = np.vstack([np.eye(N), Gamma])
    lo_stack = np.tile(problem.x_low, N)
    hi_stack = np.tile(problem.x_high, N)
    lo_stack[(N - 1) * d:] = -problem.terminal_tol
    hi_stack[(N - 1) * d:] = problem.terminal_tol

    return CondensedQP(plant=plant, problem=problem, H=H, W=W, const_M=const_M,
                       C=C, CtC=C.T @ C, Phi=Phi, Gamma=Gamma,
                       lo_stack=lo_stack, hi_stack=hi_stack, P_term=P, K=K)


@dataclass
class AdmmResult:
    U: np.ndarray            # (N, nb)
    converged: np.ndarray    # (nb,) bool
    infeasible: np.ndarray   # (nb,) bool, primal infeasibility certificate found
    iterations: np.ndarray   # (nb,)


def admm_solve(qp: CondensedQP, X0: np.ndarray, warm: np.ndarray | None = None,
               max_iter: int = 5000, tol: float = 1e-6, rho0: float = 0.1,
               sigma: float = 1e-6, check_every: int = 25,
               eps_pinf: float = 1e-4) -> AdmmResult:
    """Operator-splitting solver for min 0.5 U'HU + f'U s.t. l <= CU <= u,
    batched over columns of X0 (one problem per initial state).

    Columns finish independently: a column is frozen once it converges (both
    scaled residuals under tol) or produces a primal-infeasibility
    certificate. Penalty rho adapts to the residual ratio, which stands in
    for problem scaling.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    nb = X0.shape[0]
    N = qp.problem.horizon
    f, l, u = qp.bounds_for(X0)

    U = np.zeros((N, nb)) if warm is None else np.array(warm, dtype=np.float64)
    z = np.clip(qp.C @ U, l, u)
    y = np.zeros_like(z)

    converged = np.zeros(nb, dtype=bool)
    infeasible = np.zeros(nb, dtype=bool)
    iterations = np.zeros(nb, dtype=np.int64)
    active = np.arange(nb)

    rho = rho0
    kkt = cho_factor(qp.H + sigma * np.eye(N) + rho * qp.CtC)
    f_a, l_a, u_a = f, l, u

    it = 0
    while it < max_iter and active.size:
        it += 1
        rhs = sigma * U[:, active] - f_a + qp.C.T @ (rho * z - y)
        Un = cho_solve(kkt, rhs)
        CU = qp.C @ Un
        z = np.clip(CU + y / rho, l_a, u_a)
        dy = rho * (CU - z)
        y = y + dy
        U[:, active] = Un

        if it % check_every == 0 or it == max_iter:
            r_prim = np.max(np.abs(CU - z), axis=0)
            HU = qp.H @ Un
            Cty = qp.C.T @ y
            r_dual = np.max(np.abs(HU + f_a + Cty), axis=0)
            d_prim = 1.0 + np.maximum(np.max(np.abs(CU), axis=0),
                                      np.max(np.abs(z), axis=0))
            d_dual = 1.0 + np.maximum.reduce([np.max(np.abs(HU), axis=0),
                                              np.max(np.abs(f_a), axis=0),
                                              np.max(np.abs(Cty), axis=0)])
            ok = (r_prim <= tol * d_prim) & (r_dual <= tol * d_dual)

            # primal infeasibility certificate from the dual-variable step
            dy_norm = np.max(np.abs(dy), axis=0)
            cert = np.zeros(active.size, dtype=bool)
            has = dy_norm > 1e-14
            if np.any(has):
                v = dy[:, has] / dy_norm[has]
                ctv = np.max(np.abs(qp.C.T @ v), axis=0)
                support = (np.sum(u_a[:, has] * np.maximum(v, 0.0), axis=0)
                           + np.sum(l_a[:, has] * np.minimum(v, 0.0), axis=0))
                cert[has] = (ctv <= eps_pinf) & (support <= -eps_pinf)
            done = ok | cert

            if np.any(done):
                idx = active[done]
                converged[idx] = ok[done]
                infeasible[idx] = cert[done] & ~ok[done]
                iterations[idx] = it
                keep = ~done
                active = active[keep]
                z, y, f_a = z[:, keep], y[:, keep], f_a[:, keep]
                l_a, u_a = l_a[:, keep], u_a[:, keep]
                if not active.size:
                    break
                r_prim, r_dual = r_prim[keep], r_dual[keep]
                d_prim, d_dual = d_prim[keep], d_dual[keep]

            ratio = np.median((r_prim / d_prim) / np.maximum(r_dual / d_dual, 1e-16))
            scale = float(np.sqrt(max(ratio, 1e-16)))
            if scale > 5.0 or scale < 0.2:
                rho = float(np.clip(rho * scale, 1e-6, 1e6))
                kkt = cho_factor(qp.H + sigma * np.eye(N) + rho * qp.CtC)

    iterations[active] = it
    return AdmmResult(U=U, converged=converged, infeasible=infeasible,
                      iterations=iterations)


def clipped_feedback_inputs(qp: CondensedQP, X0: np.ndarray):
    """Simulate u = clip(-K x) for N steps; returns (U (N, nb), ok (nb,)).

    ok certifies feasibility: the trajectory stayed inside the state box and
    reached the terminal tolerance box. Used as a cheap sufficient screen and
    as a warm start for the solver.
    """
    pb = qp.problem
    plant = qp.plant
    X = np.asarray(X0, dtype=np.float64).T            # (d, nb)
    nb = X.shape[1]
    U = np.empty((pb.horizon, nb))
    ok = np.ones(nb, dtype=bool)
    for k in range(pb.horizon):
        u = np.clip(-(qp.K @ X), pb.u_low, pb.u_high).reshape(nb)
        U[k] = u
        X = plant.A @ X + np.outer(plant.B.reshape(-1), u)
        if k < pb.horizon - 1:
            ok &= np.all((X >= pb.x_low[:, None] - 1e-12)
                         & (X <= pb.x_high[:, None] + 1e-12), axis=0)
        else:
            ok &= np.all(np.abs(X) <= pb.terminal_tol + 1e-12, axis=0)
    return U, ok


def replay_inputs(qp: CondensedQP, X0: np.ndarray, U: np.ndarray,
                  slack: float | None = None):
    """Batched exact simulation of input sequences; returns ok (nb,) flags.

    slack defaults to 10x solver tolerance scaled by the box magnitude; the
    solver guarantees constraint satisfaction only to its own tolerance.
    """
    pb = qp.problem
    if slack is None:
        slack = 1e-5 * (1.0 + float(np.max(np.abs([pb.x_high, pb.x_low]))))
    X = np.atleast_2d(np.asarray(X0, dtype=np.float64)).T
    nb = X.shape[1]
    Umat = U.reshape(pb.horizon, nb)
    ok = np.all((Umat >= pb.u_low - slack) & (Umat <= pb.u_high + slack), axis=0)
    for k in range(pb.horizon):
        X = qp.plant.A @ X + np.outer(qp.plant.B.reshape(-1), Umat[k])
        if k < pb.horizon - 1:
            ok &= np.all((X >= pb.x_low[:, None] - slack)
                         & (X <= pb.x_high[:, None] + slack), axis=0)
        else:
            ok &= np.all(np.abs(X) <= pb.terminal_tol + slack, axis=0)
    return ok


def check_feasible_batch(qp: CondensedQP, X0: np.ndarray,
                         max_iter: int = 5000, tol: float = 1e-6) -> np.ndarray:
    """Screen a batch of initial states against one plant."""
    pb = qp.problem
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    feasible = np.all((X0 >= pb.x_low) & (X0 <= pb.x_high), axis=1)

    warm, quick = clipped_feedback_inputs(qp, X0)
    quick &= feasible
    feasible_out = quick.copy()

    rest = feasible & ~quick
    if np.any(rest):
        res = admm_solve(qp, X0[rest], warm=warm[:, rest],
                         max_iter=max_iter, tol=tol)
        ok = res.converged & replay_inputs(qp, X0[rest], res.U)
        feasible_out[np.nonzero(rest)[0]] = ok
    return feasible_out


def check_feasible(qp: CondensedQP, x0: np.ndarray, **kw) -> bool:
    return bool(check_feasible_batch(qp, np.asarray(x0)[None, :], **kw)[0])


def label_sample(qp: CondensedQP, x0: np.ndarray,
                 max_iter: int = 5000, tol: float = 1e-6):
    """Solve the labeling problem for one state; (u0, cost_to_go) or None.

    None means the solver found no constraint-satisfying optimum within
    budget (including replay failure), regardless of the quick screen.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    pb = qp.problem
    if np.any(x0 < pb.x_low) or np.any(x0 > pb.x_high):
        return None
    warm, _ = clipped_feedback_inputs(qp, x0[None, :])
    res = admm_solve(qp, x0[None, :], warm=warm, max_iter=max_iter, tol=tol)
    if not res.converged[0]:
        return None
    if not replay_inputs(qp, x0[None, :], res.U)[0]:
        return None
    U = res.U[:, 0]
    # the solver satisfies bounds only to its tolerance; labels stay in-box
    u0 = float(np.clip(U[0], pb.u_low, pb.u_high))
    return u0, qp.cost(x0, U)


# -- dataset generation -----------------------------------------------------------


@dataclass(frozen=True)
class CaseSpec:
    """Everything needed to build a plant from a design vector and to pose
    the sampling/labeling problem for one case study."""

    kind: str                       # "illustrative" | "suspension"
    design: dyn.DesignParams        # template carrying names/bounds
    problem: FeasibilityProblem
    suspension_constants: dyn.SuspensionConstants | None = None

    def build_plant(self, p: np.ndarray) -> dyn.DiscretePlant:
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "illustrative":
            return dyn.illustrative_plant(float(p[0]))
        if self.kind == "suspension":
            return dyn.suspension_plant(float(p[0]), float(p[1]),
                                        self.suspension_constants)
        raise ValueError(f"unknown case kind {self.kind!r}")


@dataclass
class SampleSet:
    """Accepted (x, p, u, cost) triplets plus provenance for reproducibility."""

    x: np.ndarray
    p: np.ndarray
    u: np.ndarray
    cost: np.ndarray
    design_names: tuple
    design_lower: np.ndarray
    design_upper: np.ndarray
    horizon: int
    terminal_tol: float
    seed: int
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.u.shape[0]

    def design_normalized(self) -> np.ndarray:
        span = self.design_upper - self.design_lower
        return (self.p - self.design_lower) / span

    def net_inputs(self) -> np.ndarray:
        return np.hstack([self.x, self.design_normalized()])


def _label_one(args):
    case, x0, p = args
    plant = case.build_plant(p)
    qp = condense(plant, case.problem)
    lab = label_sample(qp, x0)
    if lab is None:
        return None
    return lab


def generate_samples(case: CaseSpec, n_target: int, seed: int = 0,
                     workers: int = 1, max_chunks: int = 50) -> SampleSet:
    """Accumulate accepted, labeled samples from successive space-filling
    clouds over the joint (x, p) box until n_target are collected.

    Deterministic for fixed (seed, n_target) regardless of worker count:
    acceptance is decided per sample and merged in sample order.
    """
    pb = case.problem
    lower = np.concatenate([pb.x_low, case.design.lower])
    upper = np.concatenate([pb.x_high, case.design.upper])
    d = pb.x_low.size

    xs, ps, us, costs = [], [], [], []
    tried = 0
    chunk = 0
    while len(us) < n_target and chunk < max_chunks:
        rng = np.random.default_rng(seed + chunk)
        cloud = latin_hypercube(rng, n_target, lower, upper)
        tried += cloud.shape[0]
        tasks = [(case, cloud[i, :d], cloud[i, d:]) for i in range(cloud.shape[0])]
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_label_one, tasks, chunksize=16))
        else:
            results = [_label_one(t) for t in tasks]
        for (_, x0, p), lab in zip(tasks, results):
            if lab is None:
                continue
            xs.append(x0)
            ps.append(p)
            us.append(lab[0])
            costs.append(lab[1])
        chunk += 1

    if len(us) < n_target:
        raise RuntimeError(
            f"accepted only {len(us)}/{n_target} samples after {chunk} clouds; "
            "widen the boxes or raise max_chunks")
    accept_rate = len(us) / tried
    log.info("accepted %d/%d sampled points (%.1f%%)", len(us), tried,
             100.0 * accept_rate)
    return SampleSet(
        x=np.array(xs[:n_target]),
        p=np.array(ps[:n_target]),
        u=np.array(us[:n_target]),
        cost=np.array(costs[:n_target]),
        design_names=tuple(case.design.names),
        design_lower=np.array(case.design.lower),
        design_upper=np.array(case.design.upper),
        horizon=pb.horizon,
        terminal_tol=pb.terminal_tol,
        seed=seed,
        diagnostics={"tried": tried, "accept_rate": accept_rate,
                     "chunks": chunk},
    )


def save_samples(samples: SampleSet, csv_path, manifest_path=None) -> None:
    d = samples.x.shape[1]
    n_p = samples.p.shape[1]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)]
                   + [f"p{i + 1}" for i in range(n_p)] + ["u", "cost"])
        for i in range(len(samples)):
            w.writerow(["%.17g" % v for v in samples.x[i]]
                       + ["%.17g" % v for v in samples.p[i]]
                       + ["%.17g" % samples.u[i], "%.17g" % samples.cost[i]])
    if manifest_path is not None:
        doc = {
            "format": "ccdtwin-samples-v1",
            "n_samples": len(samples),
            "state_dim": d,
            "design_names": list(samples.design_names),
            "design_lower": ["%.17g" % v for v in samples.design_lower],
            "design_upper": ["%.17g" % v for v in samples.design_upper],
            "horizon": samples.horizon,
            "terminal_tol": samples.terminal_tol,
            "seed": samples.seed,
            "diagnostics": {k: (float(v) if isinstance(v, float) else v)
                            for k, v in samples.diagnostics.items()},
        }
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def load_samples(csv_path, manifest_path) -> SampleSet:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "ccdtwin-samples-v1":
        raise ValueError("unrecognized sample manifest format")
    d = int(doc["state_dim"])
    names = tuple(doc["design_names"])
    with open(csv_path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        want = ([f"x{i + 1}" for i in range(d)]
                + [f"p{i + 1}" for i in range(len(names))] + ["u", "cost"])
        if header != want:
            raise ValueError(f"sample CSV columns {header} do not match manifest")
        rows = np.array([[float(v) for v in row] for row in reader])
    if rows.shape[0] != doc["n_samples"]:
        raise ValueError("sample CSV row count does not match manifest")
    return SampleSet(
        x=rows[:, :d], p=rows[:, d:d + len(names)],
        u=rows[:, d + len(names)], cost=rows[:, d + len(names) + 1],
        design_names=names,
        design_lower=np.array([float(v) for v in doc["design_lower"]]),
        design_upper=np.array([float(v) for v in doc["design_upper"]]),
        horizon=int(doc["horizon"]), terminal_tol=float(doc["terminal_tol"]),
        seed=int(doc["seed"]), diagnostics=dict(doc.get("diagnostics", {})))


# -- supervised pretraining --------------------------------------------------------


def _mse_epoch(net, X: np.ndarray, t: np.ndarray, opt) -> float:
    from . import tensorgrad as tg

    tape = tg.Tape()
    bound = net.bind(tape)
    pred = bound.forward(X)
    err = tg.sub(tg.reshape(pred, (t.size,)), t)
    loss = tg.mean(tg.square(err))
    tape.backward(loss)
    opt.step([v.value for v in bound.vars], bound.grads())
    net.set_params([v.value for v in bound.vars])
    return float(loss.value)


def pretrain_networks(samples: SampleSet, mean_net, value_net, *,
                      action_scale: float = 1.0, epochs: int = 2000,
                      lr: float = 1e-3) -> dict:
    """Fit the policy mean net to labeled actions and the value wrapper's net
    to -cost_to_go by full-batch mean-squared-error regression.

    The mean net learns actions in units of action_scale (the policy
    multiplies its output back up); the value wrapper learns standardized
    targets behind a fixed affine head (out_mean/out_std set here from the
    label statistics) so disparate cost scales train at one learning rate.
    The std branch of the policy is not touched.
    """
    from . import tensorgrad as tg

    if len(samples) < 50:
        raise ValueError("need at least 50 samples to pretrain")
    X = samples.net_inputs()
    u_t = samples.u / action_scale
    v_raw = -samples.cost
    value_net.out_mean = float(np.mean(v_raw))
    value_net.out_std = float(max(np.std(v_raw), 1e-12))
    v_t = (v_raw - value_net.out_mean) / value_net.out_std

    hist = {"mean_loss": [], "value_loss": []}
    opt_m = tg.Adam(lr)
    opt_v = tg.Adam(lr)
    for ep in range(epochs):
        lm = _mse_epoch(mean_net, X, u_t, opt_m)
        lv = _mse_epoch(value_net.net, X, v_t, opt_v)
        hist["mean_loss"].append(lm)
        hist["value_loss"].append(lv)
        if ep == 0:
            lm0, lv0 = max(lm, 1e-12), max(lv, 1e-12)
        elif lm > 10.0 * lm0 or lv > 10.0 * lv0:
            raise RuntimeError(
                f"pretraining diverged at epoch {ep}: mean {lm:.3g} (start "
                f"{lm0:.3g}), value {lv:.3g} (start {lv0:.3g})")
    return hist
