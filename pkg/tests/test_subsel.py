import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from submodnet.diffgraph import MlpSpec, Node, ParamStore, exp, logsumexp, sum_, transpose
from submodnet.evalkit import fd_check
from submodnet.planted import PlantedFn, UniverseSubsetInstance, gen_selection_dataset, sample_features
from submodnet.setfn import FeatureTable, ModelConfig, build_model, calibrate, forward, values
from submodnet.subsel import (
    SelectionConfig, greedy_log_likelihood, greedy_select, init_seed_network, permutation_log_likelihood,
    seed_network, seed_spec, sinkhorn, soft_greedy_log_likelihood, train_exhaustive, train_maxmin,
)

SMALL = MlpSpec(hidden=(6,))


def model_for(t, seed=0, **kw):
    m = build_model(ModelConfig(mode="end_to_end", method="swapped", net=SMALL, dnet=SMALL, **kw), t.d, seed)
    calibrate(m, t.zsums([t.ids]), t.Z)
    return m


def modular_model(d, weights=None):
    # fixed concave map with a huge offset is linear to many digits
    m = build_model(ModelConfig(kind="fixed_dsf", depth=1), d)
    m.store.set("lam", np.array(-60.0))
    m.store.set("dsf.offset", np.array(1e12))
    if weights is not None:
        m.store.set("mod.1", np.asarray(weights, dtype=float) * 1e12)
    return m


@pytest.fixture(scope="module")
def table():
    return sample_features(12, 3, 5)


def test_single_choice_has_probability_one():
    t = FeatureTable(np.array([[0.3, 0.2]]))
    m = model_for(t)
    assert greedy_log_likelihood(m, t, [0], [0]).value == pytest.approx(0.0, abs=1e-12)


def test_equal_modular_is_uniform():
    t = FeatureTable(np.full((6, 2), 0.5))
    m = modular_model(2, [1.0, 1.0])
    got = greedy_log_likelihood(m, t, range(6), [4, 1, 2]).value
    assert got == pytest.approx(-(math.log(6) + math.log(5) + math.log(4)), abs=1e-9)


def test_small_brute_force_likelihood(table):
    m = model_for(table, seed=3)
    V, seq = [0, 3, 5, 8], [5, 0]
    F = lambda S: float(values(m, table.zsum(S))[0])
    expected, prefix = 0.0, []
    for s in seq:
        rest = [v for v in V if v not in prefix]
        gains = np.array([F(prefix + [v]) - F(prefix) for v in rest])
        expected += gains[rest.index(s)] - np.log(np.exp(gains).sum())
        prefix.append(s)
    assert greedy_log_likelihood(m, table, V, seq).value == pytest.approx(expected, abs=1e-12)


def test_step_probabilities_sum_to_one(table):
    m = model_for(table, seed=1)
    V = list(range(7))
    for prefix in ([], [2], [2, 6]):
        rest = [v for v in V if v not in prefix]
        total = sum(math.exp(greedy_log_likelihood(m, table, V, prefix + [v]).value
                             - greedy_log_likelihood(m, table, V, prefix).value) for v in rest)
        assert total == pytest.approx(1.0, abs=1e-10)


def test_likelihood_errors(table):
    m = model_for(table)
    with pytest.raises(ValueError, match="not in the universe"):
        greedy_log_likelihood(m, table, [0, 1], [2])
    nm = build_model(ModelConfig(kind="nonmonotone", net=SMALL, dnet=SMALL), table.d)
    with pytest.raises(ValueError, match="monotone"):
        greedy_log_likelihood(nm, table, [0, 1], [1])


# --- Sinkhorn ---------------------------------------------------------------

def test_zero_seed_gives_uniform():
    P = sinkhorn(np.zeros((2, 2)), 0.5, 50).P.value
    np.testing.assert_array_equal(P, np.full((2, 2), 0.5))


def test_diagonal_seed_recovers_identity():
    P = sinkhorn(np.diag(np.full(4, 10.0)), 0.1, 50).P.value
    assert np.abs(P - np.eye(4)).max() <= 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31), st.floats(0.2, 2.0))
def test_doubly_stochastic(n, seed, t):
    # entries of B / t with unit spread: convergence by 100 rounds is guaranteed
    B = np.random.default_rng(seed).normal(size=(n, n)) * t
    sp = sinkhorn(B, t, 100)
    assert sp.marginal_error() <= 1e-6 and np.all(sp.P.value >= 0)


def test_lower_temperature_sharpens():
    B = np.eye(3) * 2.0 + np.random.default_rng(0).uniform(0, 0.5, (3, 3))
    peaks = [sinkhorn(B, t, 50).P.value.max(axis=1) for t in (2.0, 1.0, 0.5, 0.25)]
    assert all(np.all(a < b) for a, b in zip(peaks, peaks[1:]))


def test_sinkhorn_gradients():
    s = ParamStore()
    B = s.add("B", np.random.default_rng(0).normal(size=(3, 3)))
    w = np.arange(9.0).reshape(3, 3)
    ok, worst = fd_check(lambda: sum_(sinkhorn(B, 0.7, 20).P * w), s, h=1e-6)
    assert ok, worst


def test_sinkhorn_rejects_bad_input():
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 2)), 0.0, 5)
    with pytest.raises(ValueError):
        sinkhorn(np.array([[np.inf, 0], [0, 0]]), 1.0, 5)


# --- soft likelihood ---------------------------------------------------------

@pytest.mark.parametrize("exclusion", ["mass", "hard_only"])
@pytest.mark.parametrize("perm", list(itertools.permutations(range(3)))[:4])
def test_soft_equals_hard_at_vertices(exclusion, perm, table):
    m = model_for(table, seed=2)
    V, S = list(range(8)), [1, 4, 6]
    P = np.eye(3)[list(perm)]
    soft = soft_greedy_log_likelihood(m, table, V, S, P, exclusion=exclusion).value
    hard = greedy_log_likelihood(m, table, V, [S[i] for i in perm]).value
    assert soft == pytest.approx(hard, abs=1e-9)


def test_uniform_soft_permutation_is_order_free(table):
    m = model_for(table, seed=2)
    V = list(range(9))
    U = np.full((3, 3), 1 / 3)
    a = soft_greedy_log_likelihood(m, table, V, [1, 4, 6], U).value
    b = soft_greedy_log_likelihood(m, table, V, [6, 1, 4], U).value
    assert a == pytest.approx(b, abs=1e-12)


def test_annealed_soft_matches_hard(table):
    m = model_for(table, seed=2)
    V, S = list(range(8)), [1, 4, 6]
    B = np.eye(3)[[2, 0, 1]] * 1.0
    P = sinkhorn(B, 0.01, 50)
    soft = soft_greedy_log_likelihood(m, table, V, S, P).value
    hard = greedy_log_likelihood(m, table, V, [S[i] for i in (2, 0, 1)]).value
    assert soft == pytest.approx(hard, abs=1e-6)


def test_soft_likelihood_shape_check(table):
    m = model_for(table)
    with pytest.raises(ValueError, match="3x3"):
        soft_greedy_log_likelihood(m, table, range(6), [0, 1, 2], np.eye(2))


# --- seed network -------------------------------------------------------------

def test_zero_seed_network_gives_uniform(table):
    spec = seed_spec(table.d, (5,))
    store = init_seed_network(spec, np.random.default_rng(0))
    for n in store:
        store.set(n, np.zeros(store[n].shape))
    B = seed_network(spec, store, table.features([0, 1, 2]))
    np.testing.assert_array_equal(B.value, 0.0)
    np.testing.assert_allclose(sinkhorn(B, 0.5, 50).P.value, 1 / 3, atol=1e-15)
    one = seed_network(spec, store, table.features([4]))
    assert one.shape == (1, 1) and sinkhorn(one, 0.5, 5).P.value[0, 0] == pytest.approx(1.0)


def test_objective_gradient_wrt_seed_network(table):
    m = model_for(table, seed=1)
    spec = seed_spec(table.d, (4,))
    omega = init_seed_network(spec, np.random.default_rng(1))
    S = [2, 5, 7]

    def obj():
        P = sinkhorn(transpose(seed_network(spec, omega, table.features(S))), 0.5, 10)
        return soft_greedy_log_likelihood(m, table, range(10), S, P)

    ok, worst = fd_check(obj, omega, h=1e-6)
    assert ok, worst


# --- greedy inference ----------------------------------------------------------

def test_greedy_modular_sorts_by_value():
    t = sample_features(10, 3, 2)
    m = modular_model(3, [1.0, 2.0, 0.5])
    order = greedy_select(m, t, range(10), 10)
    scores = t.Z @ np.array([1.0, 2.0, 0.5])
    assert order == [int(i) for i in np.argsort(-scores, kind="stable")]


def test_greedy_order_invariant_and_full_permutation(table):
    m = model_for(table, seed=4)
    V = list(range(12))
    a = greedy_select(m, table, V, 12)
    b = greedy_select(m, table, V[::-1], 12)
    assert a == b and sorted(a) == V
    with pytest.raises(ValueError):
        greedy_select(m, table, V, 13)


def test_greedy_breaks_ties_by_lowest_id():
    t = FeatureTable(np.ones((4, 2)))
    assert greedy_select(modular_model(2, [1, 1]), t, [3, 1, 2, 0], 4) == [0, 1, 2, 3]


# --- exhaustive oracle and training ------------------------------------------

def test_permutation_likelihood_brute_force(table):
    m = model_for(table, seed=3)
    V, S = list(range(7)), [1, 3, 5]
    perms = [greedy_log_likelihood(m, table, V, list(p)).value for p in itertools.permutations(S)]
    want = float(np.log(np.sum(np.exp(perms))))
    assert permutation_log_likelihood(m, table, V, S).value == pytest.approx(want, abs=1e-12)


def test_theta_ascent_step_increases_likelihood(table):
    from submodnet.diffgraph import Adam, AdamConfig, backward
    m = model_for(table, seed=3)
    V, seq = list(range(10)), [4, 9, 0]
    before = greedy_log_likelihood(m, table, V, seq).value
    opt = Adam(m.store, m.trainable(), AdamConfig(lr=1e-4, weight_decay=0.0))
    m.store.zero_grad()
    backward(greedy_log_likelihood(m, table, V, seq) * -1.0)
    opt.step()
    assert greedy_log_likelihood(m, table, V, seq).value > before


def test_planted_single_feature_signal():
    t = sample_features(60, 3, 8)
    rng = np.random.default_rng(0)
    data = []
    for _ in range(40):
        V = [int(v) for v in rng.choice(60, 10, replace=False)]
        top = sorted(V, key=lambda s: -t.Z[s, 1])[:3]
        data.append(UniverseSubsetInstance(tuple(V), tuple(top)))
    m = model_for(t, seed=0)
    res = train_maxmin(m, t, data[:30], data[30:], SelectionConfig(epochs=6, lr_theta=5e-2, batch_size=5))
    w = res.model.store["mod.0"].value + res.model.store["mod.1"].value + res.model.store["mod.2"].value
    assert int(np.argmax(w)) == 1


def test_training_is_deterministic_and_exhaustive_runs():
    t = sample_features(40, 3, 2)
    data = gen_selection_dataset(PlantedFn("facility_location"), t, 8, 3, 12, 0)
    cfg = SelectionConfig(epochs=2, batch_size=4)
    a = train_maxmin(model_for(t), t, data[:8], data[8:], cfg)
    b = train_maxmin(model_for(t), t, data[:8], data[8:], cfg)
    assert [r["loglik"] for r in a.metrics] == [r["loglik"] for r in b.metrics]
    ex = train_exhaustive(model_for(t), t, data[:8], data[8:], cfg)
    assert len(ex.metrics) == 2 and not ex.diverged


def test_selection_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(tau=0)
    with pytest.raises(ValueError):
        SelectionConfig(sinkhorn_t=-1)
    with pytest.raises(ValueError):
        SelectionConfig(exclusion="none")
