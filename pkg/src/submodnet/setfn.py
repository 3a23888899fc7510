"""Trainable set functions built from positive modular functions.

Every model is evaluated through the feature sums ``sum_{s in S} z_s`` of its
input sets: a modular value is ``theta . zsum`` so a batch of sets becomes a
(B, d) matrix and the whole recursion runs vectorized.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from .diffgraph import (
    MlpSpec,
    Node,
    ParamStore,
    const,
    log,
    matmul,
    maximum,
    minimum,
    no_grad,
    sigmoid,
    take,
    where,
)
from .quadrature import QuadratureSpec
from .shapefn import ShapeFn, kappa

KINDS = ("monotone", "alpha", "nonmonotone", "submix", "fixed_dsf")


@dataclass
class FeatureTable:
    """Ground set with one non-negative feature row per element."""

    Z: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.Z = np.ascontiguousarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if not np.all(np.isfinite(self.Z)) or np.any(self.Z < 0):
            raise ValueError("features must be finite and non-negative")
        if self.ids is None:
            self.ids = np.arange(len(self.Z))
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids) or len(self.ids) != len(self.Z):
            raise ValueError("element ids must be unique, one per row")
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    @property
    def n(self) -> int:
        return len(self.Z)

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def rows(self, S: Iterable[int]) -> np.ndarray:
        """Row indices of ``S`` in ascending element-id order."""
        try:
            return np.array([self._row[int(s)] for s in sorted(set(int(s) for s in S))], dtype=np.int64)
        except KeyError as e:
            raise KeyError(f"unknown element id {e.args[0]}") from None

    def zsum(self, S: Iterable[int]) -> np.ndarray:
        r = self.rows(S)
        if len(r) == 0:
            return np.zeros(self.d)
        return self.Z[r].sum(axis=0)

    def zsums(self, sets: Iterable[Iterable[int]]) -> np.ndarray:
        sets = list(sets)
        out = np.zeros((len(sets), self.d))
        for i, S in enumerate(sets):
            out[i] = self.zsum(S)
        return out

    def features(self, ids: Iterable[int]) -> np.ndarray:
        return self.Z[[self._row[int(i)] for i in ids]]


@dataclass
class ModelConfig:
    kind: str = "monotone"
    depth: int = 2
    mode: str = "decoupled"
    alpha: float = 1.0
    k: int = 10
    share_modular: bool = False
    train_lambda: bool = True
    lam_init: float = 0.5
    net: MlpSpec = field(default_factory=MlpSpec)
    dnet: MlpSpec = field(default_factory=MlpSpec)
    inner: QuadratureSpec = field(default_factory=lambda: QuadratureSpec("clenshaw_curtis", 33))
    outer: QuadratureSpec = field(default_factory=lambda: QuadratureSpec("clenshaw_curtis", 33))
    method: str = "nested"
    warp: float = 0.0
    dsf_offset: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.depth < 1:
            raise ValueError("recursion depth must be >= 1")
        if not (0 <= self.lam_init <= 1):
            raise ValueError("lam_init must lie in [0, 1]")
        if self.kind == "alpha":
            kappa(self.alpha, self.k)

    def to_json(self) -> dict:
        d = asdict(self)
        d["net"], d["dnet"] = self.net.to_json(), self.dnet.to_json()
        d["inner"], d["outer"] = self.inner.to_json(), self.outer.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["net"], d["dnet"] = MlpSpec.from_json(d["net"]), MlpSpec.from_json(d["dnet"])
        d["inner"], d["outer"] = QuadratureSpec(**d["inner"]), QuadratureSpec(**d["outer"])
        return cls(**d)


@dataclass
class SetFnModel:
    config: ModelConfig
    dim: int
    store: ParamStore
    shapes: dict[str, ShapeFn] = field(default_factory=dict)
    flags: Counter = field(default_factory=Counter)

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def depth(self) -> int:
        return self.config.depth

    def mod_name(self, n: int) -> str:
        return "mod" if self.config.share_modular else f"mod.{n}"

    def lam(self) -> Node:
        return sigmoid(self.store["lam"])

    def trainable(self) -> list[str]:
        names = list(self.store)
        if not self.config.train_lambda:
            names = [n for n in names if n != "lam"]
        return names

    def to_json(self) -> dict:
        return {
            "model_kind": self.kind,
            "config": self.config.to_json(),
            "dim": self.dim,
            "shapes": {k: v.to_json() for k, v in self.shapes.items()},
            "params": self.store.to_json(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SetFnModel":
        return cls(
            config=ModelConfig.from_json(payload["config"]),
            dim=payload["dim"],
            store=ParamStore.from_json(payload["params"]),
            shapes={k: ShapeFn.from_json(v) for k, v in payload["shapes"].items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "SetFnModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def copy(self) -> "SetFnModel":
        return SetFnModel.from_json(self.to_json())


def build_model(config: ModelConfig, dim: int, rng: np.random.Generator | int = 0) -> SetFnModel:
    rng = np.random.default_rng(rng)
    store = ParamStore()
    model = SetFnModel(config, dim, store)
    kind = config.kind
    n_mod = 1 if kind in ("nonmonotone", "submix") else config.depth + 1
    for n in range(1 if config.share_modular else n_mod):
        store.add(model.mod_name(n), np.ones(dim), nonneg=True)
    lam = min(max(config.lam_init, 1e-6), 1 - 1e-6)
    store.add("lam", np.array(np.log(lam / (1 - lam))))

    def shape(kind_, prefix, kappa_=0.0):
        return ShapeFn(kind_, config.mode, prefix, net=config.net, dnet=config.dnet,
                       inner=config.inner, outer=config.outer, method=config.method, kappa=kappa_,
                       warp=config.warp)

    if kind in ("monotone", "alpha"):
        model.shapes["phi"] = shape("monotone_concave", "phi")
    if kind == "alpha":
        model.shapes["phihat"] = shape("alpha_tilted", "phihat", kappa(config.alpha, config.k))
    if kind == "nonmonotone":
        model.shapes["psi"] = shape("general_concave", "psi")
    for fn in model.shapes.values():
        fn.init_params(store, rng)
    if kind == "submix":
        store.add("mix", np.array([1.0, 0.1, 0.01]), nonneg=True)
    if kind == "fixed_dsf":
        store.add("dsf.offset", np.array(config.dsf_offset), nonneg=True)
    return model


# --- forward pass -----------------------------------------------------------

def _modular(model: SetFnModel, zsum: Node, n: int) -> Node:
    return matmul(zsum, model.store[model.mod_name(n)])


_LOG_FLOOR = 1e-300


def _safe_log(model: SetFnModel, x: Node) -> Node:
    bad = x.value <= 0
    if np.any(bad):
        model.flags["log_guard"] += int(bad.sum())
    return log(maximum(x, np.full(x.shape, _LOG_FLOOR)))


def forward(model: SetFnModel, zsum, inputs: dict | None = None) -> Node:
    """Model values for a (B, d) matrix of set feature sums.

    If ``inputs`` is a dict it receives the arguments fed to each shape
    function (keyed by shape name), which the decoupled regularizer needs.
    """
    zsum = const(zsum)
    if zsum.ndim == 1:
        zsum = zsum.reshape(1, -1)
    kind, store = model.kind, model.store
    record = inputs if inputs is not None else {}

    if kind in ("monotone", "alpha", "fixed_dsf"):
        F = _modular(model, zsum, 0)
        if kind == "alpha":
            record.setdefault("phihat", []).append(F)
            F = model.shapes["phihat"](store, F)
        lam = model.lam()
        for n in range(1, model.depth + 1):
            G = lam * F + (1.0 - lam) * _modular(model, zsum, n)
            if kind == "fixed_dsf":
                F = _dsf_concave(model, G)
            else:
                record.setdefault("phi", []).append(G)
                F = model.shapes["phi"](store, G)
        return F

    if kind == "nonmonotone":
        psi = model.shapes["psi"]
        m = _modular(model, zsum, 0)
        over = m.value > psi.x_max
        if np.any(over):
            model.flags["xmax_clamp"] += int(over.sum())
        m = minimum(m, np.full(m.shape, psi.x_max))
        record.setdefault("psi", []).append(m)
        return psi(store, m)

    if kind == "submix":
        s = _modular(model, zsum, 0)
        empty = s.value <= 0
        mix = store["mix"]
        l1 = _safe_log(model, where(empty, np.ones(s.shape), s))
        l2 = _safe_log(model, l1)
        l3 = _safe_log(model, l2)
        val = take(mix, 0) * l1 + take(mix, 1) * l2 + take(mix, 2) * l3
        return where(empty, np.zeros(s.shape), val)

    raise ValueError(f"unknown kind {kind!r}")


def _dsf_concave(model: SetFnModel, x: Node) -> Node:
    offset = model.store["dsf.offset"]
    if offset.value <= 0:
        raise ValueError("fixed concave offset must be > 0")
    if np.any(x.value + offset.value <= 0):
        raise ValueError("log argument x + offset must be > 0")
    return log(x + offset) - log(offset)


def calibrate(model: SetFnModel, zsums: np.ndarray, element_feats: np.ndarray | None = None,
              passes: int = 4) -> float:
    """Set b_max (and x_max) to the largest shape-function input over ``zsums``.

    The recursion inputs depend on the shape functions themselves, so a few
    fixed-point passes are run; the last pass may still overshoot slightly,
    which the tail integral clamps.  Returns the chosen b_max.
    """
    zsums = np.atleast_2d(np.asarray(zsums, dtype=np.float64))
    store = model.store
    if model.kind in ("submix", "fixed_dsf"):
        return 0.0
    with no_grad():
        mods = [zsums @ store[model.mod_name(n)].value for n in range(len(_mod_indices(model)))]
    if model.kind == "nonmonotone":
        b = float(max(mods[0].max(), 1e-12))
        model.shapes["psi"].calibrate(b, freeze_scale=True)
        return b

    m_unit = None
    if model.kind == "alpha" and element_feats is not None:
        m_unit = float((np.asarray(element_feats) @ store[model.mod_name(0)].value).max())
    b = float(max(max(m.max() for m in mods), 1e-12))
    for fn in model.shapes.values():
        if fn.scale is None:
            fn.calibrate(b, m_unit=m_unit)
    for _ in range(passes):
        rec: dict = {}
        with no_grad():
            forward(model, zsums, rec)
        new_b = max(float(np.max(x.value)) for xs in rec.values() for x in xs)
        new_b = max(new_b, 1e-12)
        for fn in model.shapes.values():
            fn.calibrate(new_b, m_unit=m_unit)
        if abs(new_b - b) <= 1e-12 * b:
            break
        b = new_b
    for fn in model.shapes.values():
        fn.calibrate(b, m_unit=m_unit, freeze_scale=True)
    return b


def _mod_indices(model: SetFnModel) -> list[int]:
    if model.config.share_modular:
        return [0]
    return [0] if model.kind in ("nonmonotone", "submix") else list(range(model.depth + 1))


# --- set-level API ------------------------------------------------------------

def modular_value(weights, table: FeatureTable, S: Iterable[int]) -> Node:
    weights = const(weights)
    if np.any(weights.value < 0):
        raise ValueError("modular weights must be non-negative")
    return matmul(Node(table.zsum(S)), weights)


def set_value(model: SetFnModel, table: FeatureTable, S: Iterable[int]) -> Node:
    S = list(S)
    if model.kind == "alpha" and len(set(S)) > model.config.k:
        model.flags["alpha_size_exceeded"] += 1
    return take(forward(model, table.zsum(S)), 0)


def _require(model: SetFnModel, kind: str) -> None:
    if model.kind != kind:
        raise ValueError(f"expected a {kind} model, got {model.kind}")


def eval_monotone(model, table, S) -> Node:
    _require(model, "monotone")
    return set_value(model, table, S)


def eval_alpha(model, table, S) -> Node:
    _require(model, "alpha")
    return set_value(model, table, S)


def eval_nonmonotone(model, table, S) -> Node:
    _require(model, "nonmonotone")
    return set_value(model, table, S)


def eval_submix(model, table, S) -> Node:
    _require(model, "submix")
    return set_value(model, table, S)


def eval_fixed_dsf(model, table, S) -> Node:
    _require(model, "fixed_dsf")
    return set_value(model, table, S)


def marginal_gain(model: SetFnModel, table: FeatureTable, S: Iterable[int], s: int) -> Node:
    S = list(S)
    if s in set(S):
        raise ValueError(f"element {s} already in the set")
    both = forward(model, np.stack([table.zsum(S + [s]), table.zsum(S)]))
    return take(both, 0) - take(both, 1)


def values(model: SetFnModel, zsums: np.ndarray) -> np.ndarray:
    """Batched no-grad evaluation on feature sums."""
    with no_grad():
        return forward(model, np.atleast_2d(zsums)).value


def replace_config(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
