"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Node` holds a numpy value and, when it depends on trainable
parameters, a list of parents together with a closure that maps the output
gradient to parent gradients.  Every model in this package is written in terms
of these nodes, so a single :func:`backward` call yields parameter gradients.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference and audits)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def detach(self) -> "Node":
        return Node(self.value)

    # operator sugar -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def const(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents, backward) -> Node:
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, parents, backward, requires_grad=True)
    return Node(value)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Node:
    a, b = const(a), const(b)
    out = a.value / b.value
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def power(a, p: float) -> Node:
    a = const(a)
    return _make(a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1),))


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = const(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def sigmoid(a) -> Node:
    a = const(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Node:
    a = const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Node:
    a = const(a)
    v = a.value
    out = np.logaddexp(0.0, v)
    return _make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * v)),))


def relu(a) -> Node:
    a = const(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def elu(a) -> Node:
    a = const(a)
    v = a.value
    neg = np.expm1(np.minimum(v, 0.0))
    out = np.where(v > 0, v, neg)
    return _make(out, (a,), lambda g: (g * np.where(v > 0, 1.0, neg + 1.0),))


def identity(a) -> Node:
    return const(a)


def minimum(a, b) -> Node:
    """Elementwise min; the gradient goes to ``a`` where a <= b."""
    a, b = const(a), const(b)
    pick_a = a.value <= b.value
    return _make(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
        ),
    )


def maximum(a, b) -> Node:
    a, b = const(a), const(b)
    pick_a = a.value >= b.value
    return _make(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
        ),
    )


def where(mask, a, b) -> Node:
    a, b = const(a), const(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        ),
    )


# --- shape and reductions ---------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Node:
    a = const(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None) -> Node:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis) * (1.0 / n)


def reshape(a, shape) -> Node:
    a = const(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Node:
    a = const(a)
    return _make(a.value.T, (a,), lambda g: (g.T,))


def take(a, idx) -> Node:
    a = const(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), back)


def concat(nodes, axis=0) -> Node:
    nodes = [const(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(nodes, axis=0) -> Node:
    nodes = [const(n) for n in nodes]
    return _make(
        np.stack([n.value for n in nodes], axis=axis),
        nodes,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def matmul(a, b) -> Node:
    a, b = const(a), const(b)

    def back(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
            gb = av.T @ g if av.ndim == 2 else g * av
        elif av.ndim == 1:
            ga = bv @ g
            gb = np.multiply.outer(av, g)
        else:
            ga = g @ bv.T
            gb = av.T @ g
        return ga, gb

    return _make(a.value @ b.value, (a, b), back)


def logsumexp(a, axis=-1, weights=None) -> Node:
    """Max-shifted log-sum-exp, optionally with non-negative weights.

    With weights the result is ``log(sum(w * exp(a)))``; entries with zero
    weight are excluded entirely (they may be ``-inf`` in ``a``).
    """
    a = const(a)
    w = None if weights is None else const(weights)
    v = a.value
    wv = np.ones_like(v) if w is None else np.broadcast_to(w.value, v.shape)
    live = wv > 0
    shift = np.max(np.where(live, v, -np.inf), axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.where(live, np.exp(np.where(live, v, 0.0) - shift), 0.0)
    total = (wv * e).sum(axis=axis, keepdims=True)
    out = np.log(total) + shift

    def back(g):
        g = np.expand_dims(g, axis)
        soft = wv * e / total
        ga = g * soft
        if w is None:
            return (ga,)
        gw = _unbroadcast(g * e / total, w.shape)
        return ga, gw

    parents = (a,) if w is None else (a, w)
    return _make(np.squeeze(out, axis=axis), parents, back)


# --- backward ---------------------------------------------------------------

def _toposort(root: Node):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node.

    Visits nodes once each in reverse topological order.  Leaf gradients are
    overwritten, not accumulated across calls.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != parent.shape:
                g = _unbroadcast(g, parent.shape).reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g


# --- parameters -------------------------------------------------------------

class ParamStore:
    """Named trainable arrays with optional non-negativity projection."""

    def __init__(self):
        self._params: dict[str, Node] = {}
        self.nonneg: set[str] = set()

    def add(self, name: str, value, nonneg: bool = False) -> Node:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        node = Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = node
        if nonneg:
            self.nonneg.add(name)
            np.maximum(node.value, 0.0, out=node.value)
        return node

    def __getitem__(self, name: str) -> Node:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def set(self, name: str, value) -> None:
        node = self[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != node.shape:
            raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {node.shape}")
        node.value[...] = value

    def project(self) -> None:
        for name in self.nonneg:
            np.maximum(self._params[name].value, 0.0, out=self._params[name].value)

    def gradients(self, names=None) -> dict[str, np.ndarray]:
        names = self._params if names is None else names
        out = {}
        for n in names:
            g = self._params[n].grad
            out[n] = np.zeros_like(self._params[n].value) if g is None else g.copy()
        return out

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            self.set(n, v)

    def to_json(self) -> dict:
        return {
            n: {"shape": list(p.shape), "values": p.value.ravel().tolist(), "nonneg": n in self.nonneg}
            for n, p in self._params.items()
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ParamStore":
        store = cls()
        for n, rec in payload.items():
            store.add(n, np.array(rec["values"], dtype=np.float64).reshape(rec["shape"]), rec["nonneg"])
        return store


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class Adam:
    """Adam with L2 weight decay folded into the gradient, then projection."""

    store: ParamStore
    names: list[str]
    config: AdamConfig = field(default_factory=AdamConfig)
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        grads = self.store.gradients(self.names) if grads is None else grads
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {name!r}")
        cfg = self.config
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            p = self.store[name].value
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            m = self.m.get(name, 0.0) * cfg.beta1 + (1 - cfg.beta1) * g
            v = self.v.get(name, 0.0) * cfg.beta2 + (1 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        self.store.project()

    def state(self) -> dict:
        return {"t": self.t, "m": {k: np.copy(v) for k, v in self.m.items()},
                "v": {k: np.copy(v) for k, v in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.t = state["t"]
        self.m = {k: np.copy(v) for k, v in state["m"].items()}
        self.v = {k: np.copy(v) for k, v in state["v"].items()}


def sgd_adam_step(store: ParamStore, grads: dict[str, np.ndarray], optimizer: Adam) -> ParamStore:
    optimizer.step(grads)
    return store


# --- fully connected networks -------------------------------------------------

ACTIVATIONS = {
    "relu": relu,
    "elu": elu,
    "softplus": softplus,
    "identity": identity,
    "tanh": tanh,
    "exp": exp,
}


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int = 1
    hidden: tuple[int, ...] = (50, 50, 50)
    hidden_act: str = "softplus"
    out_act: str = "softplus"
    out_dim: int = 1

    def __post_init__(self):
        widths = (self.in_dim, *self.hidden, self.out_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        for act in (self.hidden_act, self.out_act):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.out_dim)

    def to_json(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": list(self.hidden), "hidden_act": self.hidden_act,
                "out_act": self.out_act, "out_dim": self.out_dim}

    @classmethod
    def from_json(cls, d: dict) -> "MlpSpec":
        return cls(d["in_dim"], tuple(d["hidden"]), d["hidden_act"], d["out_act"], d.get("out_dim", 1))


def init_mlp(spec: MlpSpec, store: ParamStore, prefix: str, rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    widths = spec.widths
    for i in range(len(widths) - 1):
        bound = 1.0 / np.sqrt(widths[i])
        store.add(f"{prefix}.W{i}", rng.uniform(-bound, bound, size=(widths[i], widths[i + 1])))
        store.add(f"{prefix}.b{i}", rng.uniform(-bound, bound, size=widths[i + 1]))


def forward_mlp(spec: MlpSpec, store: ParamStore, prefix: str, x) -> Node:
    """Apply the network row-wise.

    ``x`` of shape (B,) is treated as (B, 1) when ``in_dim == 1``.  Scalar
    outputs are returned with shape (B,).
    """
    x = const(x)
    squeeze_in = x.ndim == 1
    if squeeze_in:
        if spec.in_dim != 1:
            raise ValueError(f"vector input needs in_dim=1, spec has {spec.in_dim}")
        x = reshape(x, (-1, 1))
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"input width {x.shape[-1]} does not match in_dim {spec.in_dim}")
    n_layers = len(spec.widths) - 1
    h = x
    for i in range(n_layers):
        h = matmul(h, store[f"{prefix}.W{i}"]) + store[f"{prefix}.b{i}"]
        act = spec.hidden_act if i < n_layers - 1 else spec.out_act
        h = ACTIVATIONS[act](h)
    if spec.out_dim == 1:
        h = reshape(h, (-1,))
    return h
