"""Plant models: design parametrization, ZOH discretization, truth steppers.

Two families are built in. A two-state discrete-time benchmark plant whose
input column depends on a scalar design parameter, and a quarter-car active
suspension discretized from its continuous-time matrices. Each family has a
deterministic nominal stepper (used for training and labeling) and a hidden
higher-fidelity truth stepper (used for deployment) whose extra terms are
never exposed to the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from . import tensorgrad as tg

BLOWUP_LIMIT = 1e6


@dataclass(frozen=True)
class DesignParams:
    """Named, box-bounded physical design parameters.

    Optimization happens in normalized [0, 1] coordinates over the box; the
    plant builders always consume denormalized physical values.
    """

    names: tuple
    lower: np.ndarray
    upper: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "values", values)
        if not (len(self.names) == lower.size == upper.size == values.size):
            raise ValueError("names, bounds and values must have equal length")
        if np.any(upper <= lower):
            raise ValueError("upper bounds must exceed lower bounds")

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def normalized(self) -> np.ndarray:
        """Current values mapped to [0, 1] box coordinates."""
        return (self.values - self.lower) / self.span

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(z, dtype=np.float64) * self.span

    def project_normalized(self, z: np.ndarray) -> np.ndarray:
        """Clip normalized coordinates into [0, 1]; idempotent."""
        return np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)

    def with_normalized(self, z: np.ndarray) -> "DesignParams":
        z = self.project_normalized(z)
        return replace(self, values=self.denormalize(z))

    def with_values(self, values) -> "DesignParams":
        return replace(self, values=np.asarray(values, dtype=np.float64))


@dataclass(frozen=True)
class ContinuousPlant:
    """Continuous-time LTI core ``xdot = A_c x + B_c u + E_c d``."""

    A_c: np.ndarray
    B_c: np.ndarray  # (n, m)
    E_c: np.ndarray  # (n, q)

    def __post_init__(self):
        n = self.A_c.shape[0]
        if self.A_c.shape != (n, n):
            raise ValueError("A_c must be square")
        if self.B_c.shape[0] != n or self.E_c.shape[0] != n:
            raise ValueError("B_c/E_c row count must match A_c")


@dataclass(frozen=True)
class DiscretePlant:
    """Discrete-time plant ``x+ = A x + B u + w`` with optional disturbance map.

    ``design_bindings`` lists (param_index, row, col) entries of B that equal
    a design parameter directly; they make the input column differentiable
    with respect to the design on a tape.
    """

    A: np.ndarray
    B: np.ndarray  # (n, m)
    T: float
    E: np.ndarray | None = None  # (n, q); maps exogenous signal to state
    design_bindings: tuple = field(default=())

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise ValueError("A must be square and B rows must match")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]


def discretize_zoh(plant: ContinuousPlant, T: float) -> DiscretePlant:
    """Zero-order-hold discretization via one augmented matrix exponential.

    exp([[A_c, [B_c | E_c]], [0, 0]] * T) carries A = e^{A_c T} in its upper
    left block and the held-input integrals in the adjacent columns. When
    A_c = 0 the integrals collapse to B = B_c * T exactly.

    Raises:
        RuntimeError: if the exponential produces non-finite entries.
    """
    if T <= 0.0:
        raise ValueError("sample period must be positive")
    n = plant.A_c.shape[0]
    m = plant.B_c.shape[1]
    q = plant.E_c.shape[1]
    aug = np.zeros((n + m + q, n + m + q))
    aug[:n, :n] = plant.A_c
    aug[:n, n:n + m] = plant.B_c
    aug[:n, n + m:] = plant.E_c
    phi = expm(aug * T)
    if not np.all(np.isfinite(phi)):
        raise RuntimeError("matrix exponential diverged during discretization")
    return DiscretePlant(
        A=phi[:n, :n].copy(),
        B=phi[:n, n:n + m].copy(),
        E=phi[:n, n + m:].copy(),
        T=float(T),
    )


# -- two-state benchmark plant ------------------------------------------------

ILLUSTRATIVE_T = 1.0


def illustrative_plant(p: float, A=None, b0: float = 0.5) -> DiscretePlant:
    """Open-loop-unstable 2-state plant with B = [b0, p]^T.

    The design parameter is the second input-column entry; binding (0, 1, 0)
    exposes it to tape differentiation.
    """
    if A is None:
        A = np.array([[0.8, 0.5], [0.5, 0.6]])
    A = np.asarray(A, dtype=np.float64)
    B = np.array([[b0], [float(p)]])
    return DiscretePlant(A=A, B=B, T=ILLUSTRATIVE_T, design_bindings=((0, 1, 0),))


def custom_plant(A, B, T: float, E=None, design_bindings=()) -> DiscretePlant:
    """Discrete LTI plant from raw matrices (config-defined plants)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 1:
        B = B[:, None]
    E_arr = None
    if E is not None:
        E_arr = np.asarray(E, dtype=np.float64)
        if E_arr.ndim == 1:
            E_arr = E_arr[:, None]
    bindings = tuple((int(i), int(r), int(c)) for i, r, c in design_bindings)
    for _, r, c in bindings:
        if not (0 <= r < B.shape[0] and 0 <= c < B.shape[1]):
            raise ValueError("design binding indexes outside B")
    return DiscretePlant(A=A, B=B, T=float(T), design_bindings=bindings)


def apply_design_bindings(plant: DiscretePlant, design: DesignParams) -> DiscretePlant:
    """Return a plant whose bound B entries carry the design values."""
    if not plant.design_bindings:
        return plant
    B = plant.B.copy()
    for idx, r, c in plant.design_bindings:
        B[r, c] = design.values[idx]
    return replace(plant, B=B)


# -- quarter-car suspension ---------------------------------------------------

@dataclass(frozen=True)
class SuspensionConstants:
    """Fixed quarter-car constants (SI units), always sourced from config."""

    m_s: float    # sprung mass, kg
    m_us: float   # unsprung mass, kg
    k_t: float    # tire stiffness, N/m
    c_t: float    # tire damping, N*s/m
    T: float      # sample period, s
    row2_col3: str = "printed"  # "printed" (tire stiffness) | "physical" (spring)

    def __post_init__(self):
        if self.row2_col3 not in ("printed", "physical"):
            raise ValueError(f"row2_col3 must be 'printed' or 'physical', got {self.row2_col3!r}")


def suspension_continuous(k_s: float, c_s: float, const: SuspensionConstants) -> ContinuousPlant:
    """Continuous quarter-car matrices for state [z_us - z0, zdot_us, z_s - z_us, zdot_s].

    Input u is the actuator force (N); the exogenous channel is the road
    vertical velocity zdot0 (m/s). The (1, 2) entry of A_c follows the
    ``row2_col3`` switch: the published matrix carries the tire stiffness
    there, the physical derivation carries the suspension spring.
    """
    m_s, m_us, k_t, c_t = const.m_s, const.m_us, const.k_t, const.c_t
    row2_col3 = k_t / m_us if const.row2_col3 == "printed" else k_s / m_us
    A_c = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [-k_t / m_us, -c_s / m_us, row2_col3, c_s / m_us],
        [0.0, -1.0, 0.0, 1.0],
        [0.0, c_s / m_s, -k_s / m_s, -c_s / m_s],
    ])
    B_c = np.array([[0.0], [-1.0 / m_us], [0.0], [1.0 / m_s]])
    E_c = np.array([[-1.0], [c_t / m_us], [0.0], [0.0]])
    return ContinuousPlant(A_c=A_c, B_c=B_c, E_c=E_c)


def suspension_plant(k_s: float, c_s: float, const: SuspensionConstants) -> DiscretePlant:
    return discretize_zoh(suspension_continuous(k_s, c_s, const), const.T)


# -- nominal step ---------------------------------------------------------------

def step_nominal(plant: DiscretePlant, x: np.ndarray, u, w=None) -> np.ndarray:
    """One deterministic nominal step x+ = A x + B u (+ w).

    Accepts a single state (d,) with scalar u, or a batch (n, d) with u (n,).
    ``w`` is the already-mapped additive disturbance in state coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    u_arr = np.asarray(u, dtype=np.float64)
    b = plant.B[:, 0]
    # einsum keeps the accumulation order identical for single states and
    # batches, so residual chains rebuilt row-by-row match batched rollouts
    # bitwise (BLAS matmul is batch-shape dependent)
    if x.ndim == 1:
        out = np.einsum("k,jk->j", x, plant.A) + b * float(u_arr)
    else:
        out = np.einsum("nk,jk->nj", x, plant.A) + u_arr[:, None] * b
    if w is not None:
        out = out + w
    return out


def step_nominal_taped(plant: DiscretePlant, x, u, w=None, design_var=None):
    """Taped nominal step, differentiable in x, u and (via bindings) design.

    ``x`` is (n, d) and ``u`` is (n,), as Var or ndarray. When ``design_var``
    is given, B entries listed in ``plant.design_bindings`` are taken from
    that leaf so reward sums can backpropagate into the design.

    Raises:
        ValueError: if design_var is passed for a plant with no bindings.
    """
    n = x.value.shape[0] if isinstance(x, tg.Var) else np.asarray(x).shape[0]
    term_x = tg.matmul(x, plant.A.T)
    u_col = tg.reshape(u, (n, 1))
    if design_var is None:
        b_row = plant.B[:, 0][None, :]
        term_u = tg.mul(u_col, b_row)
    else:
        if not plant.design_bindings:
            raise ValueError("plant has no design bindings; B is not design-differentiable")
        cols = []
        bound_rows = {r: idx for idx, r, c in plant.design_bindings if c == 0}
        for r in range(plant.state_dim):
            if r in bound_rows:
                cols.append(tg.reshape(tg.slice_cols(tg.reshape(design_var, (1, -1)),
                                                     bound_rows[r], bound_rows[r] + 1), (1, 1)))
            else:
                cols.append(tg.Var(np.array([[plant.B[r, 0]]])))
        b_row = tg.concat_cols(cols)
        term_u = tg.mul(u_col, b_row)
    out = tg.add(term_x, term_u)
    if w is not None:
        out = tg.add(out, w)
    return out


# -- truth steppers -------------------------------------------------------------

@dataclass(frozen=True)
class IllustrativeGap:
    """Switches for the hidden extra terms of the benchmark truth plant."""

    bias: bool = True
    uniform: bool = True
    state_nl: bool = True
    input_nl: bool = True
    process_noise: bool = True

    @staticmethod
    def zero() -> "IllustrativeGap":
        """Truth identical to nominal (used by the zero-gap diagnostics run)."""
        return IllustrativeGap(False, False, False, False, False)


ILLUSTRATIVE_BIAS = np.array([0.1, -0.2])
ILLUSTRATIVE_NOISE_STD = np.array([0.1, 0.2])
ILLUSTRATIVE_UNIFORM_HALFWIDTH = 0.1


def step_truth_illustrative(plant: DiscretePlant, x, u, rng: np.random.Generator,
                            gap: IllustrativeGap = IllustrativeGap()) -> np.ndarray:
    """Hidden truth step for the benchmark plant.

    On top of A x + B u it adds (per the switches): Gaussian process noise,
    a constant bias, a uniform perturbation, a state-dependent term
    [0.1 x1 sin x1 + 0.1 x2 cos x2, 0.1 x2 sin x2 + 0.1 x1 cos x1], and an
    input gain term [0.5 sin(x1) u, 0.5 p cos(x2) u]. Draw order is fixed
    (normal, then uniform) so seeded runs reproduce bitwise.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    U = np.atleast_1d(np.asarray(u, dtype=np.float64))
    n = X.shape[0]
    p = plant.B[1, 0]

    # same batch-invariant kernel as step_nominal: zero-gap truth must match
    # the nominal propagation bitwise
    out = np.einsum("nk,jk->nj", X, plant.A) + U[:, None] * plant.B[:, 0]
    if gap.process_noise:
        out = out + rng.standard_normal((n, 2)) * ILLUSTRATIVE_NOISE_STD
    if gap.uniform:
        out = out + rng.uniform(-ILLUSTRATIVE_UNIFORM_HALFWIDTH,
                                ILLUSTRATIVE_UNIFORM_HALFWIDTH, size=(n, 2))
    if gap.bias:
        out = out + ILLUSTRATIVE_BIAS
    if gap.state_nl:
        x1, x2 = X[:, 0], X[:, 1]
        out = out + 0.1 * np.stack([x1 * np.sin(x1) + x2 * np.cos(x2),
                                    x2 * np.sin(x2) + x1 * np.cos(x1)], axis=1)
    if gap.input_nl:
        x1, x2 = X[:, 0], X[:, 1]
        out = out + U[:, None] * np.stack([0.5 * np.sin(x1),
                                           0.5 * p * np.cos(x2)], axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class SuspensionTruth:
    """Continuous nonlinear quarter-car integrated by fixed-step RK4.

    The cubic spring and quadratic damper gains are 1% of the designed
    linear coefficients. Substeps hold u and the road velocity constant.
    """

    plant: ContinuousPlant
    const: SuspensionConstants
    k_nl: float
    c_nl: float
    substeps: int = 10

    @staticmethod
    def build(k_s: float, c_s: float, const: SuspensionConstants,
              nl_fraction: float = 0.01, substeps: int = 10) -> "SuspensionTruth":
        return SuspensionTruth(
            plant=suspension_continuous(k_s, c_s, const),
            const=const,
            k_nl=nl_fraction * k_s,
            c_nl=nl_fraction * c_s,
            substeps=substeps,
        )

    def deriv(self, X: np.ndarray, U: np.ndarray, zdot0: np.ndarray) -> np.ndarray:
        p = self.plant
        base = X @ p.A_c.T + U[:, None] * p.B_c[:, 0] + zdot0[:, None] * p.E_c[:, 0]
        # internal nonlinear force: published sign pattern [0, -, 0, +]
        rel_v = X[:, 3] - X[:, 1]
        f_nl = self.k_nl * X[:, 2] ** 3 + self.c_nl * np.abs(rel_v) * rel_v
        base[:, 1] -= f_nl / self.const.m_us
        base[:, 3] += f_nl / self.const.m_s
        return base


def step_truth_suspension(truth: SuspensionTruth, x, u, zdot0):
    """One sample period of the nonlinear truth via RK4 substeps.

    Returns ``(x_next, blown)`` where ``blown`` marks rows whose norm
    exceeded the blow-up bound (1e6); integration freezes for blown rows.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :].copy() if single else x.copy()
    U = np.atleast_1d(np.asarray(u, dtype=np.float64))
    Z = np.broadcast_to(np.atleast_1d(np.asarray(zdot0, dtype=np.float64)), (X.shape[0],))
    h = truth.const.T / truth.substeps
    blown = ~np.all(np.isfinite(X), axis=1) | (np.max(np.abs(X), axis=1) > BLOWUP_LIMIT)
    for _ in range(truth.substeps):
        if np.all(blown):
            break
        k1 = truth.deriv(X, U, Z)
        k2 = truth.deriv(X + 0.5 * h * k1, U, Z)
        k3 = truth.deriv(X + 0.5 * h * k2, U, Z)
        k4 = truth.deriv(X + h * k3, U, Z)
        step = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X = np.where(blown[:, None], X, X + step)
        with np.errstate(invalid="ignore"):
            bad = ~np.all(np.isfinite(X), axis=1) | (np.max(np.abs(X), axis=1) > BLOWUP_LIMIT)
        blown = blown | bad
    if single:
        return X[0], bool(blown[0])
    return X, blown
