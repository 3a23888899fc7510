"""Learning set functions from (universe, chosen subset) pairs.

The set function defines a probabilistic greedy sampler: at every step the
next element is drawn with probability proportional to
``exp(tau * marginal gain)``.  Training maximizes the likelihood of the chosen
subset under an adversarial soft ordering produced by Sinkhorn normalization
of a learned seed matrix.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffgraph import (
    Adam,
    AdamConfig,
    MlpSpec,
    Node,
    NonFiniteGradient,
    ParamStore,
    backward,
    const,
    exp,
    forward_mlp,
    init_mlp,
    logsumexp,
    matmul,
    maximum,
    no_grad,
    reshape,
    sum_,
    take,
    transpose,
)
from .planted import UniverseSubsetInstance
from .setfn import FeatureTable, SetFnModel, calibrate, forward

EXCLUSIONS = ("mass", "hard_only")


@dataclass
class SoftPermutation:
    P: Node
    t: float
    k: int

    def marginal_error(self) -> float:
        P = self.P.value
        return float(max(np.abs(P.sum(axis=0) - 1).max(), np.abs(P.sum(axis=1) - 1).max()))


@dataclass
class SelectionConfig:
    tau: float = 1.0
    sinkhorn_t: float = 0.5
    sinkhorn_iters: int = 50
    inner_steps: int = 1
    outer_steps: int = 5
    seed_hidden: tuple[int, ...] = (32,)
    epochs: int = 30
    batch_size: int = 16
    lr_theta: float = 2e-3
    lr_omega: float = 2e-3
    weight_decay: float = 1e-4
    exclusion: str = "mass"
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.sinkhorn_t > 0:
            raise ValueError("Sinkhorn temperature must be > 0")
        if self.sinkhorn_iters < 1 or self.inner_steps < 0 or self.outer_steps < 1:
            raise ValueError("need sinkhorn_iters >= 1, inner_steps >= 0, outer_steps >= 1")
        if self.exclusion not in EXCLUSIONS:
            raise ValueError(f"unknown exclusion rule {self.exclusion!r}")
        self.seed_hidden = tuple(self.seed_hidden)


def _require_monotone(model: SetFnModel) -> None:
    if model.kind not in ("monotone", "alpha", "fixed_dsf"):
        raise ValueError(f"greedy likelihoods need a monotone or alpha model, got {model.kind}")


def _check_members(V: Sequence[int], items: Sequence[int]) -> None:
    vs = set(V)
    bad = [s for s in items if s not in vs]
    if bad:
        raise ValueError(f"element {bad[0]} is not in the universe")
    if len(set(items)) != len(items):
        raise ValueError("sequence has repeated elements")


def greedy_log_likelihood(model: SetFnModel, table: FeatureTable, V: Sequence[int],
                          seq: Sequence[int], tau: float = 1.0) -> Node:
    """Log-probability that probabilistic greedy picks ``seq`` in order.

    The common ``F(prefix)`` term cancels inside each softmax, so only
    ``F(prefix + candidate)`` is evaluated, for all steps in one batch.
    """
    _require_monotone(model)
    V, seq = list(V), list(seq)
    _check_members(V, seq)
    ZV = table.features(V)
    pos = {v: i for i, v in enumerate(V)}
    steps = len(seq)
    if steps == 0:
        return const(0.0)
    picked = np.array([pos[s] for s in seq])
    prefix = np.zeros((steps, table.d))
    live = np.ones((steps, len(V)))
    for j in range(1, steps):
        prefix[j] = prefix[j - 1] + ZV[picked[j - 1]]
        live[j:, picked[j - 1]] = 0.0
    rows = (prefix[:, None, :] + ZV[None, :, :]).reshape(-1, table.d)
    vals = reshape(forward(model, rows), (steps, len(V))) * tau
    chosen = take(vals, (np.arange(steps), picked))
    return sum_(chosen - logsumexp(vals, axis=1, weights=live))


def sinkhorn(B, t: float, k: int) -> SoftPermutation:
    """k rounds of row then column normalization of exp(B / t), in log space."""
    if not t > 0:
        raise ValueError("temperature must be > 0")
    B = const(B)
    if not np.all(np.isfinite(B.value)):
        raise ValueError("seed matrix must be finite")
    n = B.shape[0]
    L = B * (1.0 / t)
    for _ in range(k):
        L = L - reshape(logsumexp(L, axis=1), (n, 1))
        L = L - reshape(logsumexp(L, axis=0), (1, n))
    return SoftPermutation(exp(L), t, k)


def positional_encoding(n: int) -> np.ndarray:
    p = np.arange(n) / max(n - 1, 1)
    return np.stack([p, p * p, np.sin(np.pi * p), np.cos(np.pi * p)], axis=1)


def seed_spec(dim: int, hidden: Sequence[int]) -> MlpSpec:
    return MlpSpec(in_dim=dim + 4, hidden=tuple(hidden), hidden_act="tanh", out_act="identity")


def init_seed_network(spec: MlpSpec, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    init_mlp(spec, store, "seed", rng)
    return store


def seed_network(spec: MlpSpec, store: ParamStore, Z_S: np.ndarray) -> Node:
    """Seed matrix with ``B[i, j]`` scoring element ``i`` at position ``j``."""
    Z_S = np.atleast_2d(np.asarray(Z_S, dtype=np.float64))
    n = len(Z_S)
    if n < 1:
        raise ValueError("need at least one element")
    pe = positional_encoding(n)
    pairs = np.concatenate([np.repeat(Z_S, n, axis=0), np.tile(pe, (n, 1))], axis=1)
    return reshape(forward_mlp(spec, store, "seed", pairs), (n, n))


def _is_hard(P: np.ndarray) -> bool:
    return bool(np.all((P == 0) | (P == 1)))


def soft_greedy_log_likelihood(model: SetFnModel, table: FeatureTable, V: Sequence[int],
                               S: Sequence[int], P, tau: float = 1.0,
                               exclusion: str = "mass") -> Node:
    """Relaxed likelihood where step ``j`` picks the soft row ``(P Z_S)_j``.

    ``P[j, i]`` is the weight of ``S[i]`` at position ``j``.  Competitors are
    all of ``V``; under ``exclusion="mass"`` a member of ``S`` keeps weight
    ``1 - (mass already consumed)``, under ``"hard_only"`` members are dropped
    only when ``P`` is an exact permutation matrix.  Both coincide with
    :func:`greedy_log_likelihood` at vertices.
    """
    _require_monotone(model)
    if exclusion not in EXCLUSIONS:
        raise ValueError(f"unknown exclusion rule {exclusion!r}")
    V, S = list(V), list(S)
    _check_members(V, S)
    P = P.P if isinstance(P, SoftPermutation) else const(P)
    n = len(S)
    if P.shape != (n, n):
        raise ValueError(f"P must be {n}x{n}, got {P.shape}")
    if n == 0:
        return const(0.0)
    ZV, ZS = table.features(V), table.features(S)
    R = matmul(P, ZS)
    # prefix[j] = sum of soft rows before j (strictly lower-triangular mask)
    prefix = matmul(np.tril(np.ones((n, n)), -1), R)
    num = forward(model, prefix + R) * tau
    rows = reshape(prefix, (n, 1, table.d)) + ZV[None, :, :]
    vals = reshape(forward(model, reshape(rows, (n * len(V), table.d))), (n, len(V))) * tau

    pos = {v: i for i, v in enumerate(V)}
    cols = np.array([pos[s] for s in S])
    if exclusion == "mass" or _is_hard(P.value):
        consumed = matmul(np.tril(np.ones((n, n)), -1), P)  # (positions, members)
        scatter = np.zeros((n, len(V)))
        scatter[np.arange(n), cols] = 1.0
        # non-members have no scattered mass and keep weight one
        weights = maximum(1.0 - matmul(consumed, scatter), np.zeros((n, len(V))))
    else:
        weights = np.ones((n, len(V)))
    return sum_(num - logsumexp(vals, axis=1, weights=weights))


def greedy_select(model: SetFnModel, table: FeatureTable, V: Sequence[int], k: int) -> list[int]:
    """Deterministic greedy order; ties go to the lowest element id."""
    V = sorted(int(v) for v in V)
    if k > len(V):
        raise ValueError(f"k={k} exceeds |V|={len(V)}")
    ZV = table.features(V)
    rest = list(range(len(V)))
    cur = np.zeros(table.d)
    out = []
    with no_grad():
        base = forward(model, cur[None, :]).value[0]
        for _ in range(k):
            vals = forward(model, cur[None, :] + ZV[rest]).value - base
            j = int(np.argmax(vals))
            i = rest.pop(j)
            out.append(V[i])
            cur = cur + ZV[i]
            base = forward(model, cur[None, :]).value[0]
    return out


# --- training -------------------------------------------------------------------

def _calibration_sums(table: FeatureTable, data: Sequence[UniverseSubsetInstance]) -> np.ndarray:
    """Largest sets the greedy chain can touch: S* plus one more element."""
    rows = []
    for inst in data:
        base = table.zsum(inst.S_star)
        rest = [v for v in inst.V if v not in set(inst.S_star)]
        rows.append(base[None, :] + (table.features(rest) if rest else np.zeros((1, table.d))))
    return np.concatenate(rows) if rows else np.zeros((1, table.d))


def mean_jaccard_of(model: SetFnModel, table: FeatureTable, data: Sequence[UniverseSubsetInstance]) -> float:
    from .evalkit import mean_jaccard

    preds = [greedy_select(model, table, inst.V, len(inst.S_star)) for inst in data]
    return mean_jaccard(preds, [inst.S_star for inst in data])


@dataclass
class SelectionResult:
    model: SetFnModel
    omega: ParamStore | None = None
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    diverged: bool = False
    epoch_seconds: list[float] = field(default_factory=list)


def _minibatches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _maxmin_objective(model, table, insts, spec, omega, cfg: SelectionConfig, seed_grad: bool = True) -> Node:
    total = None
    for inst in insts:
        S = sorted(inst.S_star)
        if seed_grad:
            B = seed_network(spec, omega, table.features(S))
            P = sinkhorn(transpose(B), cfg.sinkhorn_t, cfg.sinkhorn_iters)
        else:
            # set-function steps treat P as a constant; skip taping Sinkhorn
            with no_grad():
                B = seed_network(spec, omega, table.features(S))
                P = sinkhorn(transpose(B), cfg.sinkhorn_t, cfg.sinkhorn_iters).P.value
        ll = soft_greedy_log_likelihood(model, table, inst.V, S, P, cfg.tau, cfg.exclusion)
        total = ll if total is None else total + ll
    return total * (1.0 / len(insts))


def train_maxmin(model: SetFnModel, table: FeatureTable, train: Sequence[UniverseSubsetInstance],
                 dev: Sequence[UniverseSubsetInstance], config: SelectionConfig) -> SelectionResult:
    """Alternate ``inner_steps`` descent steps on the seed network with
    ``outer_steps`` ascent steps on the set function, one minibatch per step.
    Keeps the epoch with the best dev mean Jaccard coefficient.
    """
    _require_monotone(model)
    rng = np.random.default_rng([config.seed, 1])
    spec = seed_spec(table.d, config.seed_hidden)
    omega = init_seed_network(spec, np.random.default_rng([config.seed, 2]))
    opt_theta = Adam(model.store, model.trainable(),
                     AdamConfig(lr=config.lr_theta, weight_decay=config.weight_decay))
    opt_omega = Adam(omega, list(omega), AdamConfig(lr=config.lr_omega, weight_decay=config.weight_decay))
    sums = _calibration_sums(table, train)
    calibrate(model, sums, table.Z)

    result = SelectionResult(model=model.copy(), omega=omega)
    best = -math.inf
    cycle = config.inner_steps + config.outer_steps
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        calibrate(model, sums, table.Z)
        lls = []
        try:
            for idx in _minibatches(len(train), config.batch_size, rng):
                insts = [train[i] for i in idx]
                theta_turn = (step % cycle) >= config.inner_steps
                step += 1
                model.store.zero_grad()
                omega.zero_grad()
                obj = _maxmin_objective(model, table, insts, spec, omega, config, seed_grad=not theta_turn)
                if not np.isfinite(obj.value):
                    raise FloatingPointError("non-finite likelihood")
                lls.append(float(obj.value))
                if theta_turn:
                    backward(obj * -1.0)
                    opt_theta.step(model.store.gradients(opt_theta.names))
                else:
                    backward(obj)
                    opt_omega.step(omega.gradients(opt_omega.names))
        except (FloatingPointError, NonFiniteGradient):
            result.diverged = True
            break
        result.epoch_seconds.append(time.perf_counter() - t0)
        row = {"epoch": epoch, "loglik": float(np.mean(lls)), "dev_mjc": mean_jaccard_of(model, table, dev)}
        result.metrics.append(row)
        if row["dev_mjc"] > best:
            best, result.best_epoch = row["dev_mjc"], epoch
            result.model = model.copy()
    return result


def permutation_log_likelihood(model: SetFnModel, table: FeatureTable, V: Sequence[int],
                               S: Sequence[int], tau: float = 1.0) -> Node:
    """log of the total probability, over all orderings of ``S``, that
    probabilistic greedy picks exactly ``S``.  Shares work across orderings
    through the 2^|S| distinct prefixes; only meant for small ``S``.
    """
    _require_monotone(model)
    V, S = list(V), sorted(S)
    _check_members(V, S)
    n = len(S)
    if n > 8:
        raise ValueError("exhaustive permutation likelihood is limited to |S| <= 8")
    if n == 0:
        return const(0.0)
    ZV = table.features(V)
    pos = {v: i for i, v in enumerate(V)}
    member = np.array([pos[s] for s in S])
    masks = list(range(2 ** n - 1))  # proper subsets of S as bitmasks
    prefix = np.array([ZV[member[[b for b in range(n) if m >> b & 1]]].sum(axis=0) for m in masks])
    live = np.ones((len(masks), len(V)))
    for r, m in enumerate(masks):
        live[r, member[[b for b in range(n) if m >> b & 1]]] = 0.0
    rows = (prefix[:, None, :] + ZV[None, :, :]).reshape(-1, table.d)
    vals = reshape(forward(model, rows), (len(masks), len(V))) * tau
    logz = logsumexp(vals, axis=1, weights=live)
    steps = vals - reshape(logz, (len(masks), 1))
    flat = reshape(steps, (-1,))
    idx = []
    for perm in itertools.permutations(range(n)):
        m, row = 0, []
        for b in perm:
            row.append(m * len(V) + member[b])
            m |= 1 << b
        idx.append(row)
    per_perm = sum_(reshape(take(flat, np.array(idx).reshape(-1)), (len(idx), n)), axis=1)
    return logsumexp(per_perm, axis=0)


def train_exhaustive(model: SetFnModel, table: FeatureTable, train: Sequence[UniverseSubsetInstance],
                     dev: Sequence[UniverseSubsetInstance], config: SelectionConfig) -> SelectionResult:
    """Reference trainer: maximize the likelihood summed over all orderings."""
    _require_monotone(model)
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.store, model.trainable(), AdamConfig(lr=config.lr_theta, weight_decay=config.weight_decay))
    sums = _calibration_sums(table, train)
    calibrate(model, sums, table.Z)
    result = SelectionResult(model=model.copy())
    best = -math.inf
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        calibrate(model, sums, table.Z)
        lls = []
        try:
            for idx in _minibatches(len(train), config.batch_size, rng):
                model.store.zero_grad()
                total = None
                for i in idx:
                    ll = permutation_log_likelihood(model, table, train[i].V, train[i].S_star, config.tau)
                    total = ll if total is None else total + ll
                obj = total * (1.0 / len(idx))
                if not np.isfinite(obj.value):
                    raise FloatingPointError("non-finite likelihood")
                lls.append(float(obj.value))
                backward(obj * -1.0)
                opt.step(model.store.gradients(opt.names))
        except (FloatingPointError, NonFiniteGradient):
            result.diverged = True
            break
        result.epoch_seconds.append(time.perf_counter() - t0)
        row = {"epoch": epoch, "loglik": float(np.mean(lls)), "dev_mjc": mean_jaccard_of(model, table, dev)}
        result.metrics.append(row)
        if row["dev_mjc"] > best:
            best, result.best_epoch = row["dev_mjc"], epoch
            result.model = model.copy()
    return result


def write_predictions(path, ids: Sequence, sequences: Sequence[Sequence[int]]) -> None:
    with open(path, "w") as fh:
        for uid, seq in zip(ids, sequences):
            fh.write(f"{uid}: " + " ".join(map(str, seq)) + "\n")
