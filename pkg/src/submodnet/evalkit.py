"""Metrics and property audits."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import hypergeom

from .diffgraph import Node, ParamStore, backward, no_grad
from .planted import PlantedFn, planted_evaluator
from .setfn import FeatureTable, SetFnModel, forward


def rmse(predictions, targets) -> float:
    p, t = np.asarray(predictions, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def jaccard_prefix(seq: Sequence[int], T: Sequence[int]) -> float:
    T = set(T)
    if len(seq) < len(T):
        raise ValueError(f"sequence of length {len(seq)} is shorter than |T|={len(T)}")
    head = set(seq[: len(T)])
    union = head | T
    return len(head & T) / len(union) if union else 1.0


def mean_jaccard(sequences: Sequence[Sequence[int]], test_sets: Sequence[Sequence[int]]) -> float:
    if len(sequences) != len(test_sets):
        raise ValueError("need one sequence per test set")
    if not sequences:
        raise ValueError("no test sets")
    return float(np.mean([jaccard_prefix(s, T) for s, T in zip(sequences, test_sets)]))


def ndcg_at_10(seq: Sequence[int], T: Sequence[int]) -> float:
    """Binary-relevance NDCG over the first 10 positions, log2(pos + 1) discount."""
    T = set(T)
    if not T:
        return 0.0
    head = list(seq[:10])
    dcg = sum(1.0 / math.log2(i + 2) for i, s in enumerate(head) if s in T)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(T), 10)))
    return dcg / ideal


def random_mean_jaccard(universe_size: int, subset_size: int) -> float:
    """Expected prefix Jaccard of a uniformly random ordering (hypergeometric overlap)."""
    k = subset_size
    overlap = np.arange(k + 1)
    pmf = hypergeom(universe_size, k, k).pmf(overlap)
    return float(np.sum(pmf * overlap / (2 * k - overlap)))


@dataclass
class AuditReport:
    prop: str
    samples: int
    max_violation: float
    violation_rate: float
    tol: float
    passed: bool

    def to_json(self) -> dict:
        return asdict(self)


def _report(prop: str, viol: np.ndarray, tol: float) -> AuditReport:
    worst = float(np.max(viol)) if viol.size else 0.0
    return AuditReport(prop, int(viol.size), worst, float(np.mean(viol > tol)) if viol.size else 0.0,
                       tol, bool(worst <= tol))


def sample_chains(ids: Sequence[int], n: int, k: int | None, rng: np.random.Generator,
                  min_s: int = 0) -> list[tuple[list[int], list[int], int]]:
    """Random (S, T, s) with S a proper subset of T and s outside T.

    |T| is uniform on [max(2, min_s + 1), min(k, |V| - 1)].
    """
    ids = np.asarray(ids)
    hi = len(ids) - 1 if k is None else min(k, len(ids) - 1)
    lo = max(2, min_s + 1)
    if hi < lo:
        raise ValueError("ground set too small for the requested chains")
    out = []
    for _ in range(n):
        t = int(rng.integers(lo, hi + 1))
        pick = rng.permutation(len(ids))[: t + 1]
        T, s = [int(v) for v in ids[pick[:t]]], int(ids[pick[t]])
        m = int(rng.integers(min_s, t))
        out.append((T[:m], T, s))
    return out


def _set_values(fn, table: FeatureTable, sets: list[list[int]], chunk: int = 2000) -> np.ndarray:
    if isinstance(fn, SetFnModel):
        Z = table.zsums(sets)
        with no_grad():
            return np.concatenate([forward(fn, Z[i:i + chunk]).value for i in range(0, len(Z), chunk)])
    return np.array([fn(S) for S in sets], dtype=np.float64)


def audit_submodular(fn, table: FeatureTable, n_samples: int = 10_000, alpha: float = 1.0,
                     k: int | None = None, seed: int = 0, tol: float = 1e-6,
                     min_s: int | None = None) -> dict[str, AuditReport]:
    """Check ``F(s|S) >= alpha F(s|T)`` and ``F(s|S) >= 0`` on random chains.

    ``fn`` is a :class:`SetFnModel`, a :class:`PlantedFn` or any callable on
    id lists.  Log-type planted functions are undefined on the empty set, so
    for them chains start at |S| = 1 unless ``min_s`` says otherwise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if isinstance(fn, PlantedFn):
        if min_s is None:
            min_s = 1 if fn.tag.startswith("log") else 0
        fn = planted_evaluator(fn, table)
    rng = np.random.default_rng(seed)
    chains = sample_chains(table.ids, n_samples, k, rng, min_s or 0)
    sets = []
    for S, T, s in chains:
        sets += [S, S + [s], T, T + [s]]
    v = _set_values(fn, table, sets).reshape(-1, 4)
    gain_S, gain_T = v[:, 1] - v[:, 0], v[:, 3] - v[:, 2]
    return {
        "submodular": _report("submodular" if alpha == 1 else f"alpha_submodular({alpha})",
                              alpha * gain_T - gain_S, tol),
        "monotone": _report("monotone", -gain_S, tol),
    }


def audit_concave(f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, points: int = 100,
                  tol: float = 1e-4) -> AuditReport:
    """Largest centered second difference of ``f`` on a uniform grid."""
    xs = np.linspace(lo, hi, points)
    y = np.asarray(f(xs), dtype=np.float64)
    return _report("concave", y[2:] - 2 * y[1:-1] + y[:-2], tol)


def audit_monotone_grid(f, lo: float, hi: float, points: int = 100, tol: float = 1e-8) -> AuditReport:
    y = np.asarray(f(np.linspace(lo, hi, points)), dtype=np.float64)
    return _report("nondecreasing", y[:-1] - y[1:], tol)


def audit_tilt(f, kappa: float, lo: float, hi: float, h: float = 1e-2, points: int = 100,
               tol: float = 1e-3) -> AuditReport:
    """Finite-difference check of f'' <= kappa f' on [lo + h, hi - 2h]."""
    xs = np.linspace(lo + h, hi - 2 * h, points)
    f0, fp, f2, fm = (np.asarray(f(x)) for x in (xs, xs + h, xs + 2 * h, xs - h))
    second = (f2 - 2 * fp + f0) / h ** 2
    first = (fp - fm) / (2 * h)
    return _report("tilt", second - kappa * first, tol)


def shape_audits(model: SetFnModel, points: int = 100, tol: float = 1e-4) -> dict[str, AuditReport]:
    """Grid audits of every shape function in ``model`` over its calibrated domain."""
    out = {}
    for name, fn in model.shapes.items():
        hi = fn.x_max if fn.kind == "general_concave" else fn.b_max

        def f(xs, fn=fn):
            return fn.values(model.store, xs)

        if fn.kind == "alpha_tilted":
            # tilted shapes may bend upward, but only as far as f'' <= kappa f'
            out[f"{name}.tilt"] = audit_tilt(f, fn.kappa / fn.m_unit, 0.0, hi, hi * 1e-3, points, tol)
        else:
            out[f"{name}.concave"] = audit_concave(f, 0.0, hi, points, tol)
        if fn.kind != "general_concave":
            out[f"{name}.monotone"] = audit_monotone_grid(f, 0.0, hi, points)
    return out


def fd_check(loss: Callable[[], Node], store: ParamStore, names: Sequence[str] | None = None,
             h: float = 1e-5, rel: float = 1e-3, abs_floor: float = 1e-6,
             max_entries: int = 12, rng: np.random.Generator | None = None) -> tuple[bool, float]:
    """Compare backprop gradients with central differences.

    Returns (all within tolerance, worst |analytic - numeric| / max(|numeric|, floor)
    in units of ``rel``).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(store) if names is None else list(names)
    store.zero_grad()
    backward(loss())
    grads = store.gradients(names)
    worst = 0.0
    for n in names:
        p = store[n].value
        flat = p.reshape(-1)
        idx = rng.permutation(flat.size)[:max_entries]
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss().value)
            flat[i] = old - h
            down = float(loss().value)
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = float(grads[n].reshape(-1)[i])
            err = abs(ana - num)
            bound = max(rel * abs(num), abs_floor)
            worst = max(worst, err / bound)
    return worst <= 1.0, worst


def write_reports(path, reports: dict[str, AuditReport]) -> None:
    with open(path, "w") as fh:
        json.dump({k: r.to_json() for k, r in reports.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
