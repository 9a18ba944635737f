"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: each operation on a ``Tensor`` allocates a
fresh node holding the numpy result plus vector-Jacobian closures for its
parents. Nothing persists between evaluations. Every op in this module also
accepts plain numpy inputs, in which case it computes the value directly and
returns a plain array; downstream modules write their math once and get both
a fast evaluation path and a differentiable path.

Parameter tensors live inside models (see ``Mlp``) and only enter a graph
while a ``recording()`` context is active.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DatasetFormatError, DimensionError, NumericalError, ValidationError

__all__ = [
    "Tensor",
    "recording",
    "is_recording",
    "backward",
    "Mlp",
    "ParamVector",
    "AdamState",
    "adam_step",
]

_RECORDING = False


@contextmanager
def recording():
    """Enable graph construction for model parameters inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = True
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


class Tensor:
    """Node in a computation graph wrapping a float64 numpy array."""

    __slots__ = ("value", "op", "parents")

    def __init__(self, value, op: str = "leaf", parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents  # tuple of (Tensor, vjp) pairs

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar; all dispatch through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def value_of(x) -> np.ndarray:
    """Underlying array of a Tensor, or the input coerced to float64."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # reduce a broadcast gradient back down to the parent's shape
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(op, out, pairs):
    parents = tuple((p, vjp) for p, vjp in pairs if isinstance(p, Tensor))
    return Tensor(out, op=op, parents=parents)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out
    return _node("add", out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out
    return _node("sub", out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ])


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out
    return _node("mul", out, [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out
    return _node("div", out, [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ])


def neg(a):
    av = value_of(a)
    if not isinstance(a, Tensor):
        return -av
    return _node("neg", -av, [(a, lambda g: -g)])


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    if not isinstance(a, Tensor):
        return out
    return _node("exp", out, [(a, lambda g: g * out)])


def log(a):
    av = value_of(a)
    out = np.log(av)
    if not isinstance(a, Tensor):
        return out
    return _node("log", out, [(a, lambda g: g / av)])


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)
    if not isinstance(a, Tensor):
        return out
    return _node("sqrt", out, [(a, lambda g: g * (0.5 / out))])


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    if not isinstance(a, Tensor):
        return out
    return _node("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def softplus(a):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    if not isinstance(a, Tensor):
        return out
    sig = 1.0 / (1.0 + np.exp(-av))
    return _node("softplus", out, [(a, lambda g: g * sig)])


def maximum(a, floor: float):
    """Elementwise max against a constant floor; gradient passes where a >= floor."""
    av = value_of(a)
    out = np.maximum(av, floor)
    if not isinstance(a, Tensor):
        return out
    mask = (av >= floor).astype(np.float64)
    return _node("maximum", out, [(a, lambda g: g * mask)])


def asum(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not isinstance(a, Tensor):
        return out

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _node("sum", out, [(a, vjp)])


def mean(a):
    av = value_of(a)
    n = av.size
    return mul(asum(a), 1.0 / n)


def concat(parts: Sequence, axis: int = -1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(p, Tensor) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _node("concat", out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def gather(a, idx):
    """Select columns along the last axis."""
    av = value_of(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = av[..., idx]
    if not isinstance(a, Tensor):
        return out

    def vjp(g):
        full = np.zeros(av.shape, dtype=np.float64)
        np.add.at(full, (..., idx), g)
        return full

    return _node("gather", out, [(a, vjp)])


def scatter_pair(size: int, idx_a, a, idx_b, b):
    """Assemble a last-axis vector of width `size` from two column groups."""
    av, bv = value_of(a), value_of(b)
    idx_a = np.asarray(idx_a, dtype=np.intp)
    idx_b = np.asarray(idx_b, dtype=np.intp)
    out = np.empty(av.shape[:-1] + (size,), dtype=np.float64)
    out[..., idx_a] = av
    out[..., idx_b] = bv
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out
    return _node("scatter", out, [
        (a, lambda g: g[..., idx_a]),
        (b, lambda g: g[..., idx_b]),
    ])


def linear(x, w, b):
    """Affine map x @ w.T + b with w of shape (out, in); x may carry a batch axis."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = xv @ wv.T + bv
    if not (isinstance(x, Tensor) or isinstance(w, Tensor) or isinstance(b, Tensor)):
        return out

    def vjp_w(g):
        if xv.ndim == 1:
            return np.outer(g, xv)
        return g.T @ xv

    def vjp_b(g):
        if g.ndim == 1:
            return g
        return g.sum(axis=0)

    return _node("linear", out, [
        (x, lambda g: g @ wv),
        (w, vjp_w),
        (b, vjp_b),
    ])


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar loss node with respect to the given tensors.

    Tensors unreachable from the loss get a zero gradient. Raises
    NumericalError if any node in the graph holds non-finite values.
    """
    if not isinstance(loss, Tensor):
        raise ValidationError("loss must be a Tensor produced by graph operations")
    if loss.value.ndim != 0:
        raise DimensionError(f"loss must be scalar, got shape {loss.value.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    # topo lists producers before consumers, so this names the first bad op
    for node in topo:
        if not np.all(np.isfinite(node.value)):
            raise NumericalError(f"non-finite values in '{node.op}' node")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contribution if acc is None else acc + contribution

    return [
        np.array(grads[id(t)], dtype=np.float64)
        if id(t) in grads
        else np.zeros_like(t.value)
        for t in wrt
    ]


_ACTIVATIONS = {"tanh": tanh, "softplus": softplus}


class Mlp:
    """Fully connected net: smooth activation on hidden layers, affine output.

    Hidden weights are sampled uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)];
    with ``zero_final`` the output layer starts at exactly zero, which is what
    lets a freshly built flow be the identity map.
    """

    def __init__(self, layer_widths, activation: str = "tanh",
                 rng: np.random.Generator | None = None, zero_final: bool = False):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValidationError(f"layer_widths must be >= 2 positive ints, got {layer_widths}")
        if activation not in _ACTIVATIONS:
            raise ValidationError(f"activation must be one of {sorted(_ACTIVATIONS)}, got {activation!r}")
        self.layer_widths = widths
        self.activation = activation
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        last = len(widths) - 2
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if zero_final and i == last:
                w = np.zeros((fan_out, fan_in))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.weights.append(Tensor(w, op="weight"))
            self.biases.append(Tensor(np.zeros(fan_out), op="bias"))

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    def __call__(self, x):
        xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if xv.ndim == 0 or xv.shape[-1] != self.in_width:
            raise DimensionError(
                f"input width {xv.shape[-1] if xv.ndim else 0} does not match "
                f"first layer width {self.in_width}"
            )
        act = _ACTIVATIONS[self.activation]
        use_graph = is_recording()
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if use_graph:
                h = linear(h, w, b)
            else:
                h = linear(h, w.value, b.value)
            if i < n_layers - 1:
                h = act(h)
        return h

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def to_json(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "weights": [w.value.tolist() for w in self.weights],
            "biases": [b.value.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Mlp":
        net = cls(obj["layer_widths"], activation=obj["activation"])
        if len(obj["weights"]) != len(net.weights):
            raise DatasetFormatError("weight count does not match layer widths")
        for w, b, wj, bj in zip(net.weights, net.biases, obj["weights"], obj["biases"]):
            wv = np.asarray(wj, dtype=np.float64)
            bv = np.asarray(bj, dtype=np.float64)
            if wv.shape != w.value.shape or bv.shape != b.value.shape:
                raise DatasetFormatError("parameter shapes do not match layer widths")
            if not (np.all(np.isfinite(wv)) and np.all(np.isfinite(bv))):
                raise ValidationError("checkpoint parameters must be finite")
            w.value = wv
            b.value = bv
        return net


class ParamVector:
    """Flat float64 view over a model's trainable tensors.

    Keeps a stable index map (offset, shape) back to each owning tensor, so
    flatten -> unflatten is the identity and the layout never changes over a
    model's lifetime.
    """

    def __init__(self, tensors: Sequence[Tensor]):
        self._tensors = list(tensors)
        self._shapes = [t.value.shape for t in self._tensors]
        sizes = [t.value.size for t in self._tensors]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def __len__(self) -> int:
        return int(self._offsets[-1])

    @property
    def index_map(self) -> list[tuple[int, tuple]]:
        return [(int(o), s) for o, s in zip(self._offsets[:-1], self._shapes)]

    def to_array(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.value.ravel() for t in self._tensors])

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self),):
            raise DimensionError(f"expected vector of length {len(self)}, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericalError("parameter vector contains non-finite entries")
        for t, off, shape in zip(self._tensors, self._offsets[:-1], self._shapes):
            t.value = values[off:off + t.value.size].reshape(shape).copy()

    def gradient(self, loss: Tensor) -> np.ndarray:
        grads = backward(loss, self._tensors)
        if not grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in grads])


@dataclass
class AdamState:
    """Adam accumulator state; one entry per flat parameter."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n: int, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if lr <= 0 or beta1 <= 0 or beta2 <= 0 or eps <= 0:
            raise ValidationError("Adam hyperparameters must be positive")
        return cls(step=0, m=np.zeros(n), v=np.zeros(n), lr=lr,
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update; returns (new params, new state)."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != state.m.shape or grad.shape != state.m.shape:
        raise DimensionError("params/grad length does not match Adam state")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("gradient contains non-finite entries; no update applied")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(step=t, m=m, v=v, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return new_params, new_state
