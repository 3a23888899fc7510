"""Differentiable fixed-node quadrature with Leibniz endpoint gradients.

Integrals are evaluated row-wise over a batch of limits.  Node positions are
treated as constants; the derivative with respect to a limit is supplied
analytically (``d/dhi = f(hi)``, ``d/dlo = -f(lo)``) instead of being traced
through the moving nodes.  Parameter gradients are the quadrature-weighted sum
of the integrand's parameter gradients at the nodes.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from .diffgraph import Node, _make, const, exp, log, minimum

RULES = ("clenshaw_curtis", "trapezoid")

# x > b_max clamps in integrate_tail are counted here rather than raised
events: Counter = Counter()

Integrand = Callable[[Node], Node]


@dataclass(frozen=True)
class QuadratureSpec:
    rule: str = "clenshaw_curtis"
    nodes: int = 33
    b_max: float = 1.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.nodes < 3:
            raise ValueError("need at least 3 nodes")
        if self.rule == "clenshaw_curtis" and self.nodes % 2 == 0:
            raise ValueError("Clenshaw-Curtis needs an odd node count")
        if not (np.isfinite(self.b_max) and self.b_max > 0):
            raise ValueError(f"b_max must be finite and > 0, got {self.b_max}")

    def with_b_max(self, b_max: float) -> "QuadratureSpec":
        return replace(self, b_max=float(b_max))

    def to_json(self) -> dict:
        return {"rule": self.rule, "nodes": self.nodes, "b_max": self.b_max}


@lru_cache(maxsize=None)
def clenshaw_curtis_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes (ascending) and weights of the n-point rule on [0, 1]."""
    N = n - 1
    theta = np.pi * np.arange(n) / N
    w = np.zeros(n)
    for k in range(n):
        s = 0.0
        for j in range(1, N // 2 + 1):
            b = 1.0 if 2 * j == N else 2.0
            s += b / (4 * j * j - 1) * np.cos(2 * j * theta[k])
        c = 1.0 if k in (0, N) else 2.0
        w[k] = c / N * (1.0 - s)
    t = (1.0 - np.cos(theta)) / 2.0
    t[0], t[-1] = 0.0, 1.0
    t.flags.writeable = False
    w = w / 2.0
    w.flags.writeable = False
    return t, w


@lru_cache(maxsize=None)
def trapezoid_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.linspace(0.0, 1.0, n)
    w = np.full(n, 1.0 / (n - 1))
    w[0] = w[-1] = 0.5 / (n - 1)
    t.flags.writeable = False
    w.flags.writeable = False
    return t, w


@dataclass(frozen=True)
class LogWarp:
    """Change of variable ``w = log(u / width + 1) / log1p(1 / width)``.

    Integrating in ``w`` instead of ``u`` puts most nodes near zero, where an
    integrand built on the same warp varies fastest.  The integral itself is
    unchanged; only the node placement moves.
    """
    width: float

    def __post_init__(self):
        if not (np.isfinite(self.width) and self.width > 0):
            raise ValueError(f"warp width must be finite and > 0, got {self.width}")

    @property
    def c(self) -> float:
        return 1.0 / np.log1p(1.0 / self.width)

    def to_w(self, u: Node) -> Node:
        return log(u * (1.0 / self.width) + 1.0) * self.c

    def to_u(self, w: np.ndarray) -> np.ndarray:
        return self.width * np.expm1(w / self.c)

    def du_dw(self, w: np.ndarray) -> np.ndarray:
        return self.width * np.exp(w / self.c) / self.c

    def pull_back(self, f: Integrand) -> Integrand:
        return lambda w: f(Node(self.to_u(w.value))) * self.du_dw(w.value)


def rule_nodes(spec: QuadratureSpec) -> tuple[np.ndarray, np.ndarray]:
    if spec.rule == "clenshaw_curtis":
        return clenshaw_curtis_01(spec.nodes)
    return trapezoid_01(spec.nodes)


def _leibniz(val: Node, lo: Node, hi: Node, f_lo: np.ndarray, f_hi: np.ndarray) -> Node:
    return _make(val.value, (val, lo, hi), lambda g: (g, -g * f_lo, g * f_hi))


def integrate_interval(f: Integrand, lo, hi, spec: QuadratureSpec, warp: LogWarp | None = None) -> Node:
    """Row-wise integral of ``f`` over [lo, hi] (requires lo <= hi)."""
    lo, hi = const(lo), const(hi)
    if warp is not None:
        return integrate_interval(warp.pull_back(f), warp.to_w(lo), warp.to_w(hi), spec)
    lo_v, hi_v = np.broadcast_arrays(lo.value, hi.value)
    if np.any(hi_v < lo_v):
        raise ValueError("integration limits out of order")
    t, w = rule_nodes(spec)
    width = (hi_v - lo_v)[..., None]
    pts = lo_v[..., None] + width * t
    fv = f(Node(pts.reshape(-1)))
    if not np.all(np.isfinite(fv.value)):
        raise FloatingPointError("non-finite integrand value at a quadrature node")
    fv = fv.reshape(pts.shape)
    val = (fv * (width * w)).sum(axis=-1)
    return _leibniz(val, lo, hi, fv.value[..., 0], fv.value[..., -1])


def integrate_cumulative(f: Integrand, x, spec: QuadratureSpec, warp: LogWarp | None = None) -> Node:
    """Approximate the integral of ``f`` over [0, x]."""
    x = const(x)
    if np.any(x.value < 0):
        raise ValueError("cumulative integral needs x >= 0")
    return integrate_interval(f, np.zeros(x.shape), x, spec, warp)


def integrate_tail(f: Integrand, x, spec: QuadratureSpec, warp: LogWarp | None = None) -> Node:
    """Approximate the integral of ``f`` over [x, b_max]; zero once x >= b_max."""
    x = const(x)
    if np.any(x.value < 0):
        raise ValueError("tail integral needs x >= 0")
    b_max = np.full(x.shape, spec.b_max)
    over = int(np.sum(x.value > spec.b_max))
    if over:
        events["tail_clamp"] += over
    lo = minimum(x, b_max)
    return integrate_interval(f, lo, b_max, spec, warp)


def _tilt_weight(b: np.ndarray, kappa: float) -> np.ndarray:
    # integral of exp(kappa a) over [0, b]
    return b if kappa == 0 else np.expm1(kappa * b) / kappa


def double_integral(
    f: Integrand,
    x,
    inner: QuadratureSpec,
    outer: QuadratureSpec | None = None,
    kappa: float = 0.0,
    method: str = "nested",
    warp: LogWarp | None = None,
) -> Node:
    """Integral over a in [0, x] of exp(kappa a) times the tail integral of f from a.

    ``method="nested"`` evaluates the inner tail integral at every outer node.
    ``method="swapped"`` uses the order-exchanged form
    ``int_0^x w(b) f(b) db + w(x) int_x^B f(b) db`` with ``w(b) = int_0^b exp(kappa a) da``,
    which needs only two single integrals.  ``warp`` moves the nodes of every
    single integral involved (see :class:`LogWarp`).
    """
    if not np.isfinite(kappa):
        raise ValueError("kappa must be finite")
    outer = inner if outer is None else replace(outer, b_max=inner.b_max)
    x = const(x)
    if np.any(x.value < 0):
        raise ValueError("double integral needs x >= 0")
    # the tail vanishes beyond b_max, so the outer limit can stop there
    x_eff = minimum(x, np.full(x.shape, inner.b_max))

    if method == "nested":
        def outer_fn(a: Node) -> Node:
            tail = integrate_tail(f, a, inner, warp)
            return tail if kappa == 0 else tail * np.exp(kappa * a.value)

        return integrate_cumulative(outer_fn, x_eff, outer, warp)

    if method == "swapped":
        def weighted(b: Node) -> Node:
            return f(b) * _tilt_weight(b.value, kappa)

        head = integrate_cumulative(weighted, x_eff, outer, warp)
        tail = integrate_tail(f, x_eff, inner, warp)
        wx = x_eff if kappa == 0 else (exp(x_eff * kappa) - 1.0) * (1.0 / kappa)
        return head + wx * tail

    raise ValueError(f"unknown method {method!r}")
