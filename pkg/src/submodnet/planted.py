"""Planted set functions and synthetic dataset generation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .setfn import FeatureTable

TAGS = (
    "log", "logdet", "facility_location", "gcut_mono",
    "log_sqrt", "log_logdet", "gcut_nonmono", "min_budget",
    "modular",
)
MONOTONE_TAGS = ("log", "logdet", "facility_location", "gcut_mono", "modular", "min_budget")
ALPHA_TAGS = ("log_sqrt", "log_logdet")
_LOG_TAGS = ("log", "log_sqrt", "log_logdet")
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class PlantedFn:
    tag: str
    lam_gc: float | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown planted tag {self.tag!r}")
        if self.lam_gc is None and self.tag.startswith("gcut"):
            object.__setattr__(self, "lam_gc", 0.1 if self.tag == "gcut_mono" else 0.8)


@dataclass(frozen=True)
class SetValueInstance:
    S: tuple[int, ...]
    y: float

    def __post_init__(self):
        if not self.S:
            raise ValueError("set-value instances need a nonempty set")


@dataclass(frozen=True)
class UniverseSubsetInstance:
    V: tuple[int, ...]
    S_star: tuple[int, ...]

    def __post_init__(self):
        if not set(self.S_star) <= set(self.V):
            raise ValueError("S_star must be a subset of V")
        if len(set(self.V)) != len(self.V):
            raise ValueError("duplicate ids in V")


@dataclass
class SetValueDataset:
    train: list[SetValueInstance]
    dev: list[SetValueInstance]
    test: list[SetValueInstance]
    norm: float

    def folds(self) -> dict[str, list[SetValueInstance]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def sample_features(n: int, d: int, seed: int | np.random.Generator = 0) -> FeatureTable:
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    return FeatureTable(rng.random((n, d)))


# --- evaluation -----------------------------------------------------------------

class _Context:
    """Quantities that depend only on the ground set."""

    def __init__(self, table: FeatureTable, ground: Sequence[int] | None):
        Zg = table.Z if ground is None else table.features(ground)
        self.Zg = Zg
        self.total_z = Zg.sum(axis=0)
        norms = np.maximum(np.linalg.norm(Zg, axis=1), _NORM_FLOOR)
        self.Ug = Zg / norms[:, None]
        sigma = float(Zg.sum())
        self.r, self.b, self.a = sigma / 3, sigma / 6, sigma / 2


def _unit(Z: np.ndarray) -> np.ndarray:
    return Z / np.maximum(np.linalg.norm(Z, axis=1), _NORM_FLOOR)[:, None]


def _logdet(Z: np.ndarray) -> float:
    M = np.eye(Z.shape[1]) + Z.T @ Z
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as e:  # cannot happen for real inputs
        raise RuntimeError("identity plus Gram matrix is not positive definite") from e
    return 2.0 * float(np.log(np.diag(L)).sum())


def _value(fn: PlantedFn, ctx: _Context, Z: np.ndarray) -> float:
    tag = fn.tag
    if len(Z) == 0:
        if tag in _LOG_TAGS:
            raise ValueError(f"{tag} is undefined on the empty set")
        return 0.0
    zs = Z.sum(axis=0)
    x = float(zs.sum())
    if tag == "modular":
        return x
    if tag == "log":
        return float(np.log(x))
    if tag == "logdet":
        return _logdet(Z)
    if tag == "facility_location":
        return float((ctx.Ug @ _unit(Z).T).max(axis=1).sum())
    if tag in ("gcut_mono", "gcut_nonmono"):
        return float(ctx.total_z @ zs - fn.lam_gc * zs @ zs)
    if tag == "log_sqrt":
        return float(np.log(x) * np.sqrt(x))
    if tag == "log_logdet":
        return float(np.log(x) * _logdet(Z))
    if tag == "min_budget":
        return float(min(x, ctx.b + min(ctx.r, x), ctx.a))
    raise AssertionError(tag)


def eval_planted(fn: PlantedFn, table: FeatureTable, S: Iterable[int],
                 ground: Sequence[int] | None = None) -> float:
    """Exact value of a planted function; ``ground`` defaults to every element."""
    ctx = _Context(table, ground)
    return _value(fn, ctx, table.Z[table.rows(S)])


def planted_evaluator(fn: PlantedFn, table: FeatureTable, ground: Sequence[int] | None = None):
    """Callable S -> value with the ground-set work done once."""
    ctx = _Context(table, ground)
    return lambda S: _value(fn, ctx, table.Z[table.rows(S)])


def prefix_values(fn: PlantedFn, table: FeatureTable, order: Sequence[int]) -> np.ndarray:
    """Values on the nested prefixes of ``order``, computed incrementally."""
    ctx = _Context(table, None)
    Z = table.features(order)
    n, d = Z.shape
    out = np.empty(n)
    csum = np.cumsum(Z, axis=0)
    x = csum.sum(axis=1)
    if fn.tag == "facility_location":
        best = np.full(len(ctx.Ug), -np.inf)
        U = _unit(Z)
        for j in range(n):
            np.maximum(best, ctx.Ug @ U[j], out=best)
            out[j] = best.sum()
        return out
    if fn.tag in ("logdet", "log_logdet"):
        M = np.eye(d)
        for j in range(n):
            M += np.outer(Z[j], Z[j])
            out[j] = 2.0 * np.log(np.diag(np.linalg.cholesky(M))).sum()
        return out if fn.tag == "logdet" else np.log(x) * out
    for j in range(n):
        # these tags only need the running feature sum
        out[j] = _from_sum(fn, ctx, csum[j], x[j])
    return out


def _from_sum(fn: PlantedFn, ctx: _Context, zs: np.ndarray, x: float) -> float:
    tag = fn.tag
    if tag == "modular":
        return x
    if tag == "log":
        return np.log(x)
    if tag == "log_sqrt":
        return np.log(x) * np.sqrt(x)
    if tag in ("gcut_mono", "gcut_nonmono"):
        return ctx.total_z @ zs - fn.lam_gc * zs @ zs
    if tag == "min_budget":
        return min(x, ctx.b + min(ctx.r, x), ctx.a)
    raise AssertionError(tag)


# --- datasets -------------------------------------------------------------------

def gen_setvalue_dataset(fn: PlantedFn, table: FeatureTable, seed: int | np.random.Generator = 0) -> SetValueDataset:
    """Nested prefixes of one shuffle of V, split into three equal folds.

    Targets are divided by the largest value on the train fold.
    """
    if table.n < 1:
        raise ValueError("empty feature table")
    rng = np.random.default_rng(seed)
    order = table.ids[rng.permutation(table.n)]
    ys = prefix_values(fn, table, order)
    parts = np.array_split(rng.permutation(table.n), 3)
    norm = float(np.max(ys[parts[0]])) if len(parts[0]) else 1.0
    if not norm > 0:
        norm = float(np.max(np.abs(ys))) or 1.0
    folds = []
    for idx in parts:
        folds.append([SetValueInstance(tuple(int(i) for i in order[: j + 1]), float(ys[j] / norm)) for j in sorted(idx)])
    return SetValueDataset(*folds, norm=norm)


def greedy_maximize(value, candidates: Sequence[int], k: int) -> list[int]:
    """Plain greedy on a set-function callable; ties go to the lowest id."""
    chosen: list[int] = []
    rest = sorted(int(c) for c in candidates)
    for _ in range(k):
        gains = [value(chosen + [s]) for s in rest]
        j = int(np.argmax(gains))  # first maximum, ids are sorted
        chosen.append(rest.pop(j))
    return chosen


def gen_selection_dataset(fn: PlantedFn, table: FeatureTable, universe_size: int, subset_size: int,
                          count: int, seed: int | np.random.Generator = 0) -> list[UniverseSubsetInstance]:
    """Random universes with greedy-optimal planted subsets."""
    if not (1 <= subset_size <= universe_size <= table.n):
        raise ValueError("need 1 <= subset_size <= universe_size <= |table|")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        V = tuple(int(v) for v in table.ids[rng.choice(table.n, universe_size, replace=False)])
        value = planted_evaluator(fn, table, V)
        out.append(UniverseSubsetInstance(V, tuple(greedy_maximize(value, V, subset_size))))
    return out


# --- files ----------------------------------------------------------------------

def write_features(path, table: FeatureTable) -> None:
    with open(path, "w") as fh:
        for i, row in zip(table.ids, table.Z):
            fh.write(f"{int(i)}," + ",".join(repr(float(v)) for v in row) + "\n")


def read_features(path, shift: bool = False) -> FeatureTable:
    """Load an ``id,f1,...,fd`` CSV; ``shift`` moves the global minimum to 0."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    Z = raw[:, 1:]
    if shift and Z.size and Z.min() < 0:
        Z = Z - Z.min()
    return FeatureTable(Z, raw[:, 0].astype(np.int64))


def _ids(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def write_setvalue(path, instances: Iterable[SetValueInstance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(",".join(map(str, inst.S)) + f"|{inst.y!r}\n")


def read_setvalue(path) -> list[SetValueInstance]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            ids, y = line.rsplit("|", 1)
            out.append(SetValueInstance(_ids(ids), float(y)))
    return out


def write_selection(path, instances: Iterable[UniverseSubsetInstance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(",".join(map(str, inst.V)) + "|" + ",".join(map(str, inst.S_star)) + "\n")


def read_selection(path) -> list[UniverseSubsetInstance]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            V, S = line.split("|")
            out.append(UniverseSubsetInstance(_ids(V), _ids(S)))
    return out
