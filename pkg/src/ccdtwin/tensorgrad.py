"""Reverse-mode automatic differentiation on an explicit tape.

The engine records primitive operations on small dense float64 arrays and
replays them backwards to accumulate adjoints. It is sized for the networks
used in this package (a few layers, width <= 64) and favors clarity and
bitwise reproducibility over generality: no views, no in-place accumulation,
no broadcasting beyond what the primitives declare.

Conventions
-----------
* A :class:`Var` wraps an ``np.ndarray`` value. Operations accept ``Var`` or
  plain arrays/scalars; plain operands are constants (no adjoint).
* Gradients are accumulated functionally (``g = g + contribution``), never
  in place, so adjoint arrays may alias safely.
* ``clip`` uses the standard subgradient convention: gradient 1 inside the
  closed interval, 0 outside.
* ``minimum``/``maximum`` route the gradient to the first argument on ties.
"""

from __future__ import annotations

import json
import math

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Var:
    """A node in the computation graph: a value plus adjoint bookkeeping."""

    __slots__ = ("value", "tape", "parents", "vjp", "grad")

    def __init__(self, value, tape=None, parents=(), vjp=None):
        self.value = _asarray(value)
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, tape={self.tape is not None})"


class Tape:
    """Ordered record of :class:`Var` nodes; topological by construction."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def leaf(self, value) -> Var:
        """Register a trainable leaf (adjoint is accumulated for it)."""
        v = Var(value, tape=self)
        self.leaves.append(v)
        return v

    def backward(self, loss: Var) -> None:
        """Accumulate adjoints of ``loss`` into every recorded node.

        Nodes unused by the loss end with an exactly-zero gradient.

        Raises:
            ValueError: if ``loss`` is not a scalar or not on this tape.
        """
        if loss.tape is not self:
            raise ValueError("loss node does not belong to this tape")
        if np.ndim(loss.value) != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        for n in self.nodes:
            if n.grad is None:
                n.grad = np.zeros_like(n.value)


def _operand(x):
    """Split an operand into (value, var-or-None)."""
    if isinstance(x, Var):
        return x.value, x
    return _asarray(x), None


def _tape_of(*vars_):
    tape = None
    for v in vars_:
        if v is not None and v.tape is not None:
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, vjp_pair):
    av, avar = _operand(a)
    bv, bvar = _operand(b)
    tape = _tape_of(avar, bvar)
    out = fwd(av, bv)
    if tape is None:
        return Var(out)
    parents = tuple(v for v in (avar, bvar) if v is not None)

    def vjp(g):
        ga, gb = vjp_pair(g, av, bv)
        grads = []
        if avar is not None:
            grads.append(_unbroadcast(ga, av.shape) if ga is not None else None)
        if bvar is not None:
            grads.append(_unbroadcast(gb, bv.shape) if gb is not None else None)
        return grads

    return Var(out, tape, parents, vjp)


def _unary(x, fwd, make_vjp):
    xv, xvar = _operand(x)
    tape = _tape_of(xvar)
    out = fwd(xv)
    if tape is None:
        return Var(out)
    return Var(out, tape, (xvar,), make_vjp(xv, out))


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def neg(x):
    return _unary(x, lambda v: -v, lambda v, out: lambda g: (-g,))


def matmul(a, b):
    """Matrix/vector product: supports 2d@2d, 2d@1d, 1d@2d, 1d@1d."""
    av, avar = _operand(a)
    bv, bvar = _operand(b)
    tape = _tape_of(avar, bvar)
    out = av @ bv
    if tape is None:
        return Var(out)
    parents = tuple(v for v in (avar, bvar) if v is not None)

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            ga, gb = g @ bv.T, av.T @ g
        elif av.ndim == 2 and bv.ndim == 1:
            ga, gb = np.outer(g, bv), av.T @ g
        elif av.ndim == 1 and bv.ndim == 2:
            ga, gb = bv @ g, np.outer(av, g)
        else:
            ga, gb = g * bv, g * av
        grads = []
        if avar is not None:
            grads.append(ga)
        if bvar is not None:
            grads.append(gb)
        return grads

    return Var(out, tape, parents, vjp)


def tanh(x):
    return _unary(x, np.tanh, lambda v, out: lambda g: (g * (1.0 - out * out),))


def exp(x):
    return _unary(x, np.exp, lambda v, out: lambda g: (g * out,))


def log(x):
    return _unary(x, np.log, lambda v, out: lambda g: (g / v,))


def square(x):
    return _unary(x, np.square, lambda v, out: lambda g: (g * 2.0 * v,))


def absolute(x):
    return _unary(x, np.abs, lambda v, out: lambda g: (g * np.sign(v),))


def softplus(x):
    """Numerically stable log(1 + exp(x)); gradient is the logistic sigmoid."""

    def fwd(v):
        return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def make(v, out):
        sig = 1.0 / (1.0 + np.exp(-v))
        return lambda g: (g * sig,)

    return _unary(x, fwd, make)


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient 1 inside the closed interval, 0 outside."""

    def make(v, out):
        mask = ((v >= lo) & (v <= hi)).astype(np.float64)
        return lambda g: (g * mask,)

    return _unary(x, lambda v: np.clip(v, lo, hi), make)


def minimum(a, b):
    def vjps(g, x, y):
        mask = (x <= y).astype(np.float64)
        return g * mask, g * (1.0 - mask)

    return _binary(a, b, np.minimum, vjps)


def maximum(a, b):
    def vjps(g, x, y):
        mask = (x >= y).astype(np.float64)
        return g * mask, g * (1.0 - mask)

    return _binary(a, b, np.maximum, vjps)


def total(x):
    """Sum all entries to a scalar."""
    return _unary(x, np.sum, lambda v, out: lambda g: (np.broadcast_to(np.asarray(g), v.shape) * np.ones_like(v),))


def mean(x):
    def make(v, out):
        n = float(v.size)
        return lambda g: (np.broadcast_to(np.asarray(g), v.shape) * np.full_like(v, 1.0 / n),)

    return _unary(x, np.mean, make)


def reshape(x, shape):
    def make(v, out):
        return lambda g: (g.reshape(v.shape),)

    return _unary(x, lambda v: v.reshape(shape), make)


def tile_rows(x, n: int):
    """Repeat a 1d vector as ``n`` identical rows; adjoint sums over rows."""
    xv, xvar = _operand(x)
    if xv.ndim != 1:
        raise ValueError("tile_rows expects a 1d vector")
    tape = _tape_of(xvar)
    out = np.broadcast_to(xv, (n, xv.shape[0])).copy()
    if tape is None:
        return Var(out)
    return Var(out, tape, (xvar,), lambda g: (g.sum(axis=0),))


def concat_cols(parts):
    """Concatenate 2d blocks along axis 1; adjoint splits columnwise."""
    vals, vars_ = [], []
    for p in parts:
        v, var = _operand(p)
        vals.append(v)
        vars_.append(var)
    tape = _tape_of(*vars_)
    out = np.concatenate(vals, axis=1)
    if tape is None:
        return Var(out)
    widths = [v.shape[1] for v in vals]
    parents = tuple(v for v in vars_ if v is not None)

    def vjp(g):
        grads, j = [], 0
        for v, var in zip(vals, vars_):
            w = v.shape[1]
            if var is not None:
                grads.append(g[:, j:j + w])
            j += w
        return grads

    _ = widths
    return Var(out, tape, parents, vjp)


def slice_cols(x, j0: int, j1: int):
    """Column slice of a 2d array; adjoint scatters back into place."""

    def make(v, out):
        def vjp(g):
            full = np.zeros_like(v)
            full[:, j0:j1] = g
            return (full,)

        return vjp

    return _unary(x, lambda v: v[:, j0:j1].copy(), make)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Weight init uniform in +/- sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Dense multi-layer perceptron with per-layer tanh/identity activation.

    Weights are stored as (fan_in, fan_out) arrays so a batch forward is
    ``x @ W + b``. ``tanh_layers[i]`` selects the activation after layer i;
    the final layer is identity unless explicitly flagged.
    """

    def __init__(self, layer_sizes, tanh_layers=None, rng: np.random.Generator | None = None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least an input and an output size")
        self.layer_sizes = list(int(s) for s in layer_sizes)
        n_layers = len(self.layer_sizes) - 1
        if tanh_layers is None:
            tanh_layers = [True] * (n_layers - 1) + [False]
        if len(tanh_layers) != n_layers:
            raise ValueError("tanh_layers must have one flag per layer")
        self.tanh_layers = [bool(t) for t in tanh_layers]
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(glorot_uniform(rng, fi, fo))
            self.biases.append(np.zeros(fo))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass; x is (in_dim,) or (n, in_dim)."""
        h = np.asarray(x, dtype=np.float64)
        for w, b, t in zip(self.weights, self.biases, self.tanh_layers):
            h = h @ w + b
            if t:
                h = np.tanh(h)
        return h

    def bind(self, tape: Tape) -> "BoundMlp":
        """Register every parameter as a leaf on ``tape``."""
        return BoundMlp(self, tape)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params) -> None:
        flat = list(params)
        if len(flat) != 2 * len(self.weights):
            raise ValueError("parameter count mismatch")
        for i in range(len(self.weights)):
            w, b = flat[2 * i], flat[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[i] = np.array(w, dtype=np.float64)
            self.biases[i] = np.array(b, dtype=np.float64)

    def copy(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.layer_sizes = list(self.layer_sizes)
        dup.tanh_layers = list(self.tanh_layers)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


class BoundMlp:
    """An :class:`Mlp` whose parameters are leaves on a specific tape."""

    def __init__(self, mlp: Mlp, tape: Tape):
        self.mlp = mlp
        self.tape = tape
        self.vars: list[Var] = []
        for w, b in zip(mlp.weights, mlp.biases):
            self.vars.append(tape.leaf(w))
            self.vars.append(tape.leaf(b))

    def forward(self, x) -> Var:
        h = x
        n_layers = len(self.mlp.weights)
        for i in range(n_layers):
            w, b = self.vars[2 * i], self.vars[2 * i + 1]
            h = add(matmul(h, w), b)
            if self.mlp.tanh_layers[i]:
                h = tanh(h)
        return h

    def grads(self) -> list[np.ndarray]:
        return [v.grad for v in self.vars]


class Adam:
    """Adaptive moment optimizer with bias correction.

    A step with any non-finite gradient is skipped entirely and counted in
    ``skipped_steps`` so training diagnostics can surface it.
    """

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.skipped_steps = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> bool:
        """Update ``params`` in place from ``grads``. Returns False if skipped."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m):
            raise ValueError("parameter group size changed between steps")
        for g in grads:
            if not np.all(np.isfinite(g)):
                self.skipped_steps += 1
                return False
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return True


def _fmt(x: float) -> str:
    return "%.17g" % x


def mlp_to_dict(mlp: Mlp) -> dict:
    """Self-describing checkpoint: sizes, activation flags, row-major arrays."""
    return {
        "format": "ccdtwin-mlp-v1",
        "layer_sizes": list(mlp.layer_sizes),
        "tanh_layers": list(mlp.tanh_layers),
        "weights": [[_fmt(x) for x in w.ravel(order="C")] for w in mlp.weights],
        "biases": [[_fmt(x) for x in b.ravel(order="C")] for b in mlp.biases],
    }


def mlp_from_dict(doc: dict) -> Mlp:
    if doc.get("format") != "ccdtwin-mlp-v1":
        raise ValueError(f"unrecognized checkpoint format: {doc.get('format')!r}")
    mlp = Mlp(doc["layer_sizes"], doc["tanh_layers"])
    sizes = mlp.layer_sizes
    weights, biases = [], []
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = np.array([float(s) for s in doc["weights"][i]], dtype=np.float64)
        b = np.array([float(s) for s in doc["biases"][i]], dtype=np.float64)
        if w.size != fi * fo or b.size != fo:
            raise ValueError(f"layer {i}: array size does not match layer_sizes")
        weights.append(w.reshape(fi, fo, order="C"))
        biases.append(b)
    mlp.weights = weights
    mlp.biases = biases
    return mlp


def save_mlp(mlp: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mlp_to_dict(mlp), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_mlp(path) -> Mlp:
    with open(path, "r", encoding="utf-8") as fh:
        return mlp_from_dict(json.load(fh))


def gaussian_log_prob(u, mu, sigma):
    """Log-density of u under N(mu, sigma^2), elementwise. Taped or plain.

    All three arguments may be Var or ndarray; the result is a Var when any
    argument is taped, otherwise a constant Var.
    """
    ls = log(sigma)
    z = mul(sub(u, mu), exp(neg(ls)))
    return sub(sub(mul(square(z), -0.5), ls), 0.5 * _LOG_2PI)


def gaussian_log_prob_np(u: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Fast path used during rollouts; mirrors :func:`gaussian_log_prob` bitwise."""
    ls = np.log(sigma)
    z = (u - mu) * np.exp(-ls)
    return np.square(z) * -0.5 - ls - 0.5 * _LOG_2PI


def smooth_l1(a, b):
    """Huber penalty: 0.5*(a-b)^2 if |a-b| < 1 else |a-b| - 0.5.

    Composed from the clip primitive so the exact piecewise gradient falls
    out of the subgradient convention: with c = clip(d, -1, 1) the value is
    c*d - 0.5*c^2 and the derivative is clip(d, -1, 1).
    """
    d = sub(a, b)
    c = clip(d, -1.0, 1.0)
    return sub(mul(c, d), mul(square(c), 0.5))
