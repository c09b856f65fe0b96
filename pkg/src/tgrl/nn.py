"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives the networks in this package need are
provided: affine maps, elementwise nonlinearities, concatenation, constant
row-mixing matrices (gather/scatter over graph vertices), reductions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class TrainingError(FloatingPointError):
    pass


class ConfigurationError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "idx", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", idx: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.idx = idx
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.mul(self, -1.0)


class Tape:
    """Ordered record of primitive ops; replayed once in reverse by :meth:`backward`."""

    def __init__(self, record: bool = True):
        self.record = record
        self._count = 0
        self._ops: list[tuple[int, tuple[int, ...], Callable]] = []
        # a name may be registered more than once when a parameter is reused
        self.leaves: dict[str, list[Tensor]] = {}
        self.output: Tensor | None = None
        self.consumed = False

    def __len__(self) -> int:
        return len(self._ops)

    def _new(self, value: np.ndarray, name: str | None = None) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"non-finite value produced ({name or 'intermediate'})")
        t = Tensor(value, self, self._count, name)
        self._count += 1
        return t

    def _record(self, value, parents: Sequence[Tensor | None], fn) -> Tensor:
        out = self._new(value)
        if not self.record:
            return out
        ids = tuple(-1 if p is None else p.idx for p in parents)
        self._ops.append((out.idx, ids, fn))
        return out

    def _wrap(self, x) -> Tensor | None:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise TapeError("tensor belongs to another tape")
            return x
        return None

    # -- leaves ------------------------------------------------------------
    def leaf(self, value, name: str | None = None) -> Tensor:
        t = self._new(np.asarray(value, dtype=np.float64), name)
        if name is not None:
            self.leaves.setdefault(name, []).append(t)
        return t

    # -- elementwise -----------------------------------------------------
    def add(self, a, b) -> Tensor:
        ta, tb = self._wrap(a), self._wrap(b)
        va = ta.value if ta is not None else np.asarray(a, dtype=float)
        vb = tb.value if tb is not None else np.asarray(b, dtype=float)
        sa, sb = va.shape, vb.shape
        return self._record(va + vb, (ta, tb), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Tensor:
        ta, tb = self._wrap(a), self._wrap(b)
        va = ta.value if ta is not None else np.asarray(a, dtype=float)
        vb = tb.value if tb is not None else np.asarray(b, dtype=float)
        sa, sb = va.shape, vb.shape
        return self._record(va - vb, (ta, tb), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Tensor:
        ta, tb = self._wrap(a), self._wrap(b)
        va = ta.value if ta is not None else np.asarray(a, dtype=float)
        vb = tb.value if tb is not None else np.asarray(b, dtype=float)
        sa, sb = va.shape, vb.shape
        return self._record(
            va * vb, (ta, tb),
            lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)),
        )

    def relu(self, x: Tensor) -> Tensor:
        mask = x.value > 0
        return self._record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.value)
        return self._record(y, (x,), lambda g: (g * (1.0 - y * y),))

    def exp(self, x: Tensor) -> Tensor:
        y = np.exp(x.value)
        return self._record(y, (x,), lambda g: (g * y,))

    def log(self, x: Tensor) -> Tensor:
        v = x.value
        return self._record(np.log(v), (x,), lambda g: (g / v,))

    def softplus(self, x: Tensor) -> Tensor:
        v = x.value
        y = np.logaddexp(0.0, v)
        return self._record(y, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * v)),))

    def square(self, x: Tensor) -> Tensor:
        v = x.value
        return self._record(v * v, (x,), lambda g: (2.0 * g * v,))

    def clip(self, x: Tensor, lo: float, hi: float) -> Tensor:
        v = x.value
        inside = (v >= lo) & (v <= hi)
        return self._record(np.clip(v, lo, hi), (x,), lambda g: (g * inside,))

    def minimum(self, a: Tensor, b: Tensor) -> Tensor:
        pick_a = a.value <= b.value
        return self._record(
            np.where(pick_a, a.value, b.value), (a, b),
            lambda g: (g * pick_a, g * ~pick_a),
        )

    # -- structural ------------------------------------------------------
    def linear(self, x: Tensor, W, b=None) -> Tensor:
        """``x @ W.T + b`` over the last axis of ``x``; ``W`` is (out, in).

        ``W`` and ``b`` may be plain arrays, in which case they are constants.
        """
        tW, tb = self._wrap(W), self._wrap(b)
        xv = x.value
        Wv = tW.value if tW is not None else W
        if xv.shape[-1] != Wv.shape[1]:
            raise ShapeError(f"input width {xv.shape[-1]} != layer in-dim {Wv.shape[1]}")
        # 2-D GEMMs; numpy loops over leading axes for N-D @ 2-D
        lead = xv.shape[:-1]
        x2 = xv.reshape(-1, xv.shape[-1])
        y = x2 @ Wv.T
        if b is not None:
            y += tb.value if tb is not None else b
        y = y.reshape(*lead, Wv.shape[0])

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            gW = g2.T @ x2 if tW is not None else None
            gb = g2.sum(axis=0) if tb is not None else None
            return (g2 @ Wv).reshape(*lead, Wv.shape[1]), gW, gb

        return self._record(y, (x, tW, tb), back)

    def concat(self, xs: Sequence[Tensor | np.ndarray], axis: int = -1) -> Tensor:
        vals = [x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float) for x in xs]
        parents = [self._wrap(x) for x in xs]
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def back(g):
            return tuple(np.split(g, sizes, axis=axis))

        return self._record(np.concatenate(vals, axis=axis), parents, back)

    def mix(self, M: np.ndarray, x: Tensor) -> Tensor:
        """Left-multiply the second-to-last axis by a constant matrix (gather / scatter-sum)."""
        return self._record(np.matmul(M, x.value), (x,), lambda g: (np.matmul(M.T, g),))

    def reshape(self, x: Tensor, shape) -> Tensor:
        old = x.value.shape
        return self._record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def index(self, x: Tensor, key) -> Tensor:
        old = x.value.shape

        def back(g):
            out = np.zeros(old)
            out[key] = g
            return (out,)

        return self._record(x.value[key], (x,), back)

    def sum(self, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        old = x.value.shape
        y = x.value.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, old).copy(),)

        return self._record(np.asarray(y), (x,), back)

    def mean(self, x: Tensor, axis=None) -> Tensor:
        n = x.value.size if axis is None else x.value.shape[axis]
        return self.mul(self.sum(x, axis=axis), 1.0 / n)

    # -- reverse pass ----------------------------------------------------
    def backward(self, output: Tensor | None = None, output_grad=None) -> dict[int, np.ndarray]:
        """Propagate ``output_grad`` back through every recorded op.

        Returns gradients keyed by tensor index; see :meth:`grad_of` and
        :meth:`named_grads` for convenient lookups.
        """
        if not self.record:
            raise TapeError("tape was created with record=False")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        output = output if output is not None else self.output
        if output is None:
            raise TapeError("no output tensor to differentiate")
        if output_grad is None:
            output_grad = np.ones_like(output.value)
        output_grad = np.asarray(output_grad, dtype=float)
        if output_grad.shape != output.value.shape:
            raise ShapeError(f"output_grad shape {output_grad.shape} != output shape {output.value.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {output.idx: output_grad}
        for out_idx, parents, fn in reversed(self._ops):
            if out_idx > output.idx:
                continue
            g = grads.pop(out_idx, None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if p < 0 or gp is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + gp
                else:
                    grads[p] = gp
        self._grads = grads
        return grads

    def grad_of(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.idx)
        return np.zeros_like(t.value) if g is None else g

    def named_grads(self) -> dict[str, np.ndarray]:
        """Gradient per leaf name, summed over every use of that name."""
        out = {}
        for name, ts in self.leaves.items():
            g = self.grad_of(ts[0])
            for t in ts[1:]:
                g = g + self.grad_of(t)
            out[name] = g
        return out


# ---------------------------------------------------------------------------
# MLPs


ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("none", "tanh")


@dataclass
class MlpParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")
        for (W0, _), (W1, _) in zip(self.layers, self.layers[1:]):
            if W0.shape[0] != W1.shape[1]:
                raise ShapeError(f"layer dims do not chain: {W0.shape} -> {W1.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = W
            out[f"{prefix}.{i}.b"] = b
        return out

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)


def mlp_init(layer_sizes: Sequence[int], activation: str = "relu", seed: int | np.random.Generator = 0,
             output_activation: str = "none") -> MlpParams:
    """Glorot-uniform weights, U(-sqrt(6/(fan_in+fan_out)), +...), zero biases."""
    if len(layer_sizes) < 2 or any(int(n) <= 0 for n in layer_sizes):
        raise ConfigurationError(f"need >= 2 positive layer sizes, got {list(layer_sizes)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return MlpParams(layers, activation, output_activation)


def mlp_apply(tape: Tape, params: MlpParams, x: Tensor, prefix: str | None = None) -> Tensor:
    """Record an MLP on ``tape``.

    With ``prefix`` the weights become named leaves that receive gradients;
    without it they enter as constants.
    """
    act = tape.relu if params.activation == "relu" else tape.tanh
    h = x
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        if prefix is None:
            tW, tb = W, b
        else:
            tW, tb = tape.leaf(W, f"{prefix}.{i}.W"), tape.leaf(b, f"{prefix}.{i}.b")
        h = tape.linear(h, tW, tb)
        if i < last:
            h = act(h)
        elif params.output_activation == "tanh":
            h = tape.tanh(h)
    return h


def forward(params: MlpParams, x) -> tuple[Tensor, Tape]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input last dim {x.shape[-1]} != {params.in_dim}")
    tape = Tape()
    xin = tape.leaf(x, "input")
    tape.output = mlp_apply(tape, params, xin, prefix="mlp")
    return tape.output, tape


@dataclass
class MlpGradients:
    layers: list[tuple[np.ndarray, np.ndarray]]
    input: np.ndarray


def backward(tape: Tape, output_grad) -> MlpGradients:
    """Gradients of ``sum(output * output_grad)`` for a tape built by :func:`forward`."""
    tape.backward(tape.output, output_grad)
    named = tape.named_grads()
    n = sum(1 for k in named if k.startswith("mlp.") and k.endswith(".W"))
    layers = [(named[f"mlp.{i}.W"], named[f"mlp.{i}.b"]) for i in range(n)]
    return MlpGradients(layers, named["input"])


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingError(f"non-finite gradient for {name}: {bad} entries")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def finite_diff_check(loss_fn: Callable[[], tuple[float, dict[str, np.ndarray]]],
                      params: dict[str, np.ndarray], eps: float = 1e-5,
                      samples_per_param: int = 8, seed: int = 0,
                      names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` reads ``params`` (perturbed in place here) and returns
    ``(loss, grads)``. A random subset of entries of every array is probed.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    worst = 0.0
    for name in (names if names is not None else params):
        p = params[name]
        flat = p.reshape(-1)
        n = min(samples_per_param, flat.size)
        for j in rng.choice(flat.size, size=n, replace=False):
            old = flat[j]
            flat[j] = old + eps
            lp, _ = loss_fn()
            flat[j] = old - eps
            lm, _ = loss_fn()
            flat[j] = old
            numeric = (lp - lm) / (2 * eps)
            analytic = grads[name].reshape(-1)[j] if name in grads else 0.0
            err = abs(analytic - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
