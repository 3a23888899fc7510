"""Trainable univariate functions with certified shape.

All three kinds are normalized (value 0 at 0) and are built from positive
integrand networks:

* ``monotone_concave``: phi(x) = int_0^x int_a^B h(b) db da
* ``alpha_tilted``: int_0^x exp(kappa a) int_a^B g(b) db da, which satisfies
  f'' <= kappa f'
* ``general_concave``: psi(x) = phi_h(x) - [phi_hh(X) - phi_hh(X - x)] on [0, X]

Networks see the normalized input u = x / scale, so the learned curves live on
roughly [0, 1] whatever the magnitude of the modular values.  In ``decoupled``
mode the deployed function is the integral of a separate positive derivative
network; :meth:`ShapeFn.residuals` measures how far that network is from the
tail integral it is meant to equal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffgraph import MlpSpec, Node, ParamStore, const, forward_mlp, init_mlp, log, maximum, no_grad
from .quadrature import (
    LogWarp,
    QuadratureSpec,
    double_integral,
    integrate_cumulative,
    integrate_interval,
    integrate_tail,
)

KINDS = ("monotone_concave", "alpha_tilted", "general_concave")
MODES = ("end_to_end", "decoupled")


def kappa(alpha: float, k: int) -> float:
    """Tilt constant (1/k) log(1/alpha)."""
    if not (0 < alpha <= 1):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return 0.0 if alpha == 1 else math.log(1.0 / alpha) / k


def _network_names(kind: str, mode: str) -> tuple[list[str], list[str]]:
    """(integrand networks, derivative networks) for a kind/mode pair."""
    integrands = ["h", "hhat"] if kind == "general_concave" else ["h"]
    if mode == "end_to_end":
        return integrands, []
    derivs = ["dh", "dhhat"] if kind == "general_concave" else ["dh"]
    return integrands, derivs


@dataclass
class ShapeFn:
    kind: str
    mode: str
    prefix: str
    net: MlpSpec = field(default_factory=MlpSpec)
    dnet: MlpSpec = field(default_factory=MlpSpec)
    inner: QuadratureSpec = field(default_factory=QuadratureSpec)
    outer: QuadratureSpec = field(default_factory=QuadratureSpec)
    method: str = "nested"
    kappa: float = 0.0
    m_unit: float = 1.0
    scale: float | None = None
    b_max: float = 1.0
    x_max: float = 1.0
    frozen: bool = False
    warp: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kind != "alpha_tilted" and self.kappa:
            raise ValueError("only alpha_tilted shapes take a tilt")
        if not (np.isfinite(self.warp) and self.warp >= 0):
            raise ValueError("warp must be finite and >= 0")

    # --- configuration ----------------------------------------------------
    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        integrands, derivs = _network_names(self.kind, self.mode)
        for name in integrands:
            init_mlp(self.net, store, f"{self.prefix}.{name}", rng)
        for name in derivs:
            init_mlp(self.dnet, store, f"{self.prefix}.{name}", rng)

    def param_names(self, store: ParamStore) -> list[str]:
        return store.names(self.prefix + ".")

    def calibrate(self, b_max: float, m_unit: float | None = None, freeze_scale: bool = False) -> None:
        """Set the truncation point (and x_max for general_concave).

        The input scale is fixed the first time ``freeze_scale`` is requested
        and is never changed afterwards.
        """
        b_max = float(b_max)
        if not (np.isfinite(b_max) and b_max > 0):
            raise ValueError(f"b_max must be finite and > 0, got {b_max}")
        self.b_max = b_max
        if self.kind == "general_concave":
            self.x_max = b_max
        if m_unit is not None and m_unit > 0:
            self.m_unit = float(m_unit)
        if self.scale is None or not self.frozen:
            self.scale = b_max
            self.frozen = freeze_scale

    def _units(self) -> tuple[float, float, float]:
        scale = self.scale if self.scale is not None else self.b_max
        return scale, self.b_max / scale, self.kappa * scale / self.m_unit

    def _net(self, store: ParamStore, name: str):
        spec = self.dnet if name.startswith("d") else self.net
        prefix = f"{self.prefix}.{name}"
        if not self.warp:
            return lambda u: forward_mlp(spec, store, prefix, u)
        # a monotone input warp keeps the integrand positive, so shape
        # guarantees are untouched; it only spends resolution near zero
        c = 1.0 / math.log1p(1.0 / self.warp)
        return lambda u: forward_mlp(spec, store, prefix, log(u * (1.0 / self.warp) + 1.0) * c)

    @property
    def quad_warp(self) -> LogWarp | None:
        # integrate in the warped coordinate so the nodes follow the network's resolution
        return LogWarp(self.warp) if self.warp else None

    # --- evaluation -------------------------------------------------------
    def __call__(self, store: ParamStore, x) -> Node:
        if self.kind == "monotone_concave":
            return eval_monotone_concave(self, store, x)
        if self.kind == "alpha_tilted":
            return eval_alpha_tilted(self, store, x)
        return eval_general_concave(self, store, x)

    def values(self, store: ParamStore, xs) -> np.ndarray:
        with no_grad():
            return self(store, Node(np.asarray(xs, dtype=np.float64))).value

    def consistency_pairs(self, store: ParamStore, x) -> list[tuple[Node, Node]]:
        """(derivative network, tail integral it should equal) at inputs ``x``.

        Both members are in normalized units.  Empty outside decoupled mode.
        """
        if self.mode != "decoupled":
            return []
        x = const(x)
        scale, b_u, kappa_u = self._units()
        u = x * (1.0 / scale)
        spec = self.inner.with_b_max(b_u)
        if self.kind == "monotone_concave":
            return [(self._net(store, "dh")(u), integrate_tail(self._net(store, "h"), u, spec, self.quad_warp))]
        if self.kind == "alpha_tilted":
            g = self._net(store, "h")

            def tilted(a: Node) -> Node:
                return g(a) if kappa_u == 0 else g(a) * np.exp(kappa_u * a.value)

            return [(self._net(store, "dh")(u), integrate_tail(tilted, u, spec, self.quad_warp))]
        xu = self.x_max / scale
        spec = self.inner.with_b_max(xu)
        mirrored = _floor_zero(xu - u)
        return [
            (self._net(store, "dh")(u), integrate_tail(self._net(store, "h"), u, spec, self.quad_warp)),
            (self._net(store, "dhhat")(mirrored),
             integrate_tail(self._net(store, "hhat"), mirrored, spec, self.quad_warp)),
        ]

    def residuals(self, store: ParamStore, x) -> list[Node]:
        """Derivative-network output minus its paired tail integral."""
        return [d - t for d, t in self.consistency_pairs(store, x)]

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "mode": self.mode, "prefix": self.prefix,
            "net": self.net.to_json(), "dnet": self.dnet.to_json(),
            "inner": self.inner.to_json(), "outer": self.outer.to_json(),
            "method": self.method, "kappa": self.kappa, "m_unit": self.m_unit,
            "scale": self.scale, "frozen": self.frozen, "warp": self.warp, "b_max": self.b_max, "x_max": self.x_max,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ShapeFn":
        fn = cls(
            kind=d["kind"], mode=d["mode"], prefix=d["prefix"],
            net=MlpSpec.from_json(d["net"]), dnet=MlpSpec.from_json(d["dnet"]),
            inner=QuadratureSpec(**d["inner"]), outer=QuadratureSpec(**d["outer"]),
            method=d["method"], kappa=d["kappa"], m_unit=d["m_unit"],
            scale=d["scale"], b_max=d["b_max"], x_max=d["x_max"], frozen=d["frozen"], warp=d.get("warp", 0.0),
        )
        return fn


def _check_nonneg(x: Node) -> None:
    if np.any(x.value < 0):
        raise ValueError("shape functions are defined for x >= 0")


def eval_monotone_concave(fn: ShapeFn, store: ParamStore, x) -> Node:
    if fn.kind != "monotone_concave":
        raise ValueError(f"expected monotone_concave, got {fn.kind}")
    x = const(x)
    _check_nonneg(x)
    scale, b_u, _ = fn._units()
    u = x * (1.0 / scale)
    if fn.mode == "decoupled":
        return integrate_cumulative(fn._net(store, "dh"), u, fn.outer.with_b_max(b_u), fn.quad_warp)
    return double_integral(fn._net(store, "h"), u, fn.inner.with_b_max(b_u), fn.outer, method=fn.method,
                           warp=fn.quad_warp)


def eval_alpha_tilted(fn: ShapeFn, store: ParamStore, x) -> Node:
    if fn.kind != "alpha_tilted":
        raise ValueError(f"expected alpha_tilted, got {fn.kind}")
    x = const(x)
    _check_nonneg(x)
    scale, b_u, kappa_u = fn._units()
    u = x * (1.0 / scale)
    if fn.mode == "decoupled":
        return integrate_cumulative(fn._net(store, "dh"), u, fn.outer.with_b_max(b_u), fn.quad_warp)
    return double_integral(
        fn._net(store, "h"), u, fn.inner.with_b_max(b_u), fn.outer, kappa=kappa_u, method=fn.method,
        warp=fn.quad_warp,
    )


def eval_general_concave(fn: ShapeFn, store: ParamStore, x) -> Node:
    if fn.kind != "general_concave":
        raise ValueError(f"expected general_concave, got {fn.kind}")
    x = const(x)
    if np.any(x.value < 0) or np.any(x.value > fn.x_max * (1 + 1e-12)):
        raise ValueError(f"general concave shape is defined on [0, {fn.x_max}]")
    scale = fn.scale if fn.scale is not None else fn.x_max
    xu = fn.x_max / scale
    u = x * (1.0 / scale)
    if fn.mode == "decoupled":
        spec = fn.outer.with_b_max(xu)
        up = integrate_cumulative(fn._net(store, "dh"), u, spec, fn.quad_warp)
        down = integrate_interval(fn._net(store, "dhhat"), _floor_zero(xu - u), np.full(u.shape, xu), spec,
                                  fn.quad_warp)
        return up - down
    inner = fn.inner.with_b_max(xu)
    up = double_integral(fn._net(store, "h"), u, inner, fn.outer, method=fn.method, warp=fn.quad_warp)
    full = double_integral(fn._net(store, "hhat"), np.full(1, xu), inner, fn.outer, method=fn.method,
                           warp=fn.quad_warp)
    part = double_integral(fn._net(store, "hhat"), _floor_zero(xu - u), inner, fn.outer, method=fn.method,
                           warp=fn.quad_warp)
    return up - (full - part)


def _floor_zero(x: Node) -> Node:
    # rounding in x_max - u can dip a hair below zero at u = x_max
    return maximum(x, np.zeros(x.shape))


def constant_integrand(store: ParamStore, prefix: str, spec: MlpSpec, value: float) -> None:
    """Overwrite a softplus-output network so it returns ``value`` everywhere.

    Used to build analytically checkable shape functions.
    """
    if spec.out_act != "softplus":
        raise ValueError("constant_integrand expects a softplus output")
    for name in store.names(prefix + "."):
        store.set(name, np.zeros(store[name].shape))
    last = len(spec.widths) - 2
    bias = -1000.0 if value == 0 else math.log(math.expm1(value))
    store.set(f"{prefix}.b{last}", np.full(spec.out_dim, bias))
