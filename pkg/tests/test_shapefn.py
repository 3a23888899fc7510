import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from submodnet.diffgraph import MlpSpec, Node, ParamStore, backward, sum_
from submodnet.evalkit import audit_concave, audit_monotone_grid, audit_tilt, fd_check
from submodnet.quadrature import QuadratureSpec
from submodnet.shapefn import ShapeFn, constant_integrand, kappa

SMALL = MlpSpec(hidden=(8, 8))


def make(kind, mode="end_to_end", seed=0, b_max=2.0, kap=0.0, net=SMALL, **kw):
    fn = ShapeFn(kind, mode, "f", net=net, dnet=net, kappa=kap, scale=1.0, frozen=True, **kw)
    fn.calibrate(b_max)
    store = ParamStore()
    fn.init_params(store, np.random.default_rng(seed))
    return fn, store


@pytest.mark.parametrize("alpha,k,expected", [
    (1.0, 7, 0.0),
    (math.exp(-5), 5, 1.0),
    (0.5, 10, 0.0693147180559945),
])
def test_kappa(alpha, k, expected):
    assert kappa(alpha, k) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("alpha,k", [(0.0, 3), (1.5, 3), (0.5, 0)])
def test_kappa_rejects(alpha, k):
    with pytest.raises(ValueError):
        kappa(alpha, k)


@pytest.mark.parametrize("kind", ["monotone_concave", "alpha_tilted", "general_concave"])
@pytest.mark.parametrize("mode", ["end_to_end", "decoupled"])
def test_normalized_at_zero(kind, mode):
    fn, store = make(kind, mode, kap=0.2 if kind == "alpha_tilted" else 0.0)
    assert abs(fn.values(store, [0.0])[0]) < 1e-12


def test_monotone_constant_integrand_oracle():
    fn, store = make("monotone_concave")
    constant_integrand(store, "f.h", SMALL, 1.0)
    assert fn.values(store, [1.0])[0] == pytest.approx(1.5, abs=1e-9)


def test_tilted_constant_integrand_oracle():
    fn, store = make("alpha_tilted", kap=0.1)
    constant_integrand(store, "f.h", SMALL, 1.0)
    assert fn.values(store, [1.0])[0] == pytest.approx(1.5688009883, abs=1e-8)


def test_zero_tilt_matches_monotone():
    a, sa = make("alpha_tilted", seed=3)
    m, sm = make("monotone_concave", seed=3)
    xs = np.linspace(0, 2, 9)
    np.testing.assert_allclose(a.values(sa, xs), m.values(sm, xs), atol=1e-9)


@pytest.mark.parametrize("x,expected", [(0.5, 0.75), (1.0, 1.0), (1.5, 0.75)])
def test_general_concave_oracle(x, expected):
    # g = ghat = 1, x_max = 2: (2x - x^2/2) - x^2/2 = 2x - x^2
    fn, store = make("general_concave")
    constant_integrand(store, "f.h", SMALL, 1.0)
    constant_integrand(store, "f.hhat", SMALL, 1.0)
    assert fn.values(store, [x])[0] == pytest.approx(expected, abs=1e-9)


def test_general_concave_one_sided_reduces_to_monotone():
    g, sg = make("general_concave", seed=5)
    constant_integrand(sg, "f.hhat", SMALL, 0.0)
    m, sm = make("monotone_concave", seed=5)
    xs = np.linspace(0, 2, 7)
    np.testing.assert_allclose(g.values(sg, xs), m.values(sm, xs), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_grid_audits_on_random_networks(seed):
    fn, store = make("monotone_concave", seed=seed)
    f = lambda xs: fn.values(store, xs)
    assert audit_concave(f, 0, 2, 100, 1e-4).passed
    assert audit_monotone_grid(f, 0, 2, 100).passed
    vals = f(np.linspace(0.2, 2.0, 10))
    assert np.all(np.diff(vals) > 0) and np.all(np.diff(vals, 2) <= 1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_tilt_inequality_audit(seed):
    kap = kappa(0.5, 10)
    fn, store = make("alpha_tilted", seed=seed, kap=kap)
    f = lambda xs: fn.values(store, xs)
    assert audit_tilt(f, kap, 0, 2, tol=1e-3).passed
    assert audit_monotone_grid(f, 0, 2).passed


@pytest.mark.parametrize("seed", range(3))
def test_general_concave_audit(seed):
    fn, store = make("general_concave", seed=seed)
    assert audit_concave(lambda xs: fn.values(store, xs), 0, 2, 100, 1e-4).passed


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 5.0))
def test_concave_for_any_seed_and_domain(seed, b_max):
    fn, store = make("monotone_concave", seed=seed, b_max=b_max)
    assert audit_concave(lambda xs: fn.values(store, xs), 0, b_max, 50, 1e-6).passed


def test_scale_is_frozen_once_requested():
    fn = ShapeFn("monotone_concave", "end_to_end", "f")
    fn.calibrate(3.0, freeze_scale=True)
    fn.calibrate(5.0)
    assert fn.scale == 3.0 and fn.b_max == 5.0


def test_decoupled_exact_tail_gives_zero_residual():
    fn, store = make("monotone_concave", "decoupled")
    constant_integrand(store, "f.h", SMALL, 1.0)
    # dh(u) = 2 - u cannot be written by a softplus net exactly, so check the pair directly
    (d, t), = fn.consistency_pairs(store, Node(np.array([0.0, 1.0, 2.0])))
    np.testing.assert_allclose(t.value, [2.0, 1.0, 0.0], atol=1e-12)
    assert d.shape == t.shape


def test_general_decoupled_has_two_pairs():
    fn, store = make("general_concave", "decoupled")
    assert len(fn.residuals(store, np.array([0.5, 1.0]))) == 2
    fn2, store2 = make("general_concave")
    assert fn2.residuals(store2, np.array([0.5])) == []


@pytest.mark.parametrize("kind", ["monotone_concave", "alpha_tilted", "general_concave"])
@pytest.mark.parametrize("mode", ["end_to_end", "decoupled"])
def test_parameter_and_input_gradients(kind, mode):
    fn, store = make(kind, mode, seed=2, kap=0.1 if kind == "alpha_tilted" else 0.0,
                     net=MlpSpec(hidden=(4,)))
    x = store.add("x", np.array([0.3, 1.1, 1.7]))
    ok, worst = fd_check(lambda: sum_(fn(store, x) ** 2), store, h=1e-6)
    assert ok, worst


@pytest.mark.parametrize("mode", ["end_to_end", "decoupled"])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_warp_keeps_shape_to_quadrature_precision(mode, seed):
    # the integrand varies on the warp's 1e-3 scale; integrating in the warped
    # coordinate keeps the grid audits clean at tight tolerances
    net = MlpSpec(hidden=(8, 8), out_act="exp")
    fn, store = make("monotone_concave", mode, seed=seed, warp=1e-3, net=net)
    f = lambda xs: fn.values(store, xs)
    assert audit_concave(f, 0, 2, 200, 1e-9).passed
    assert audit_monotone_grid(f, 0, 2, 200, 1e-12).passed


@pytest.mark.parametrize("kind,kap,x,expected", [
    ("monotone_concave", 0.0, 1.0, 1.5),
    ("alpha_tilted", 0.1, 1.0, 1.5688009883),
])
def test_warp_leaves_constant_oracles(kind, kap, x, expected):
    fn, store = make(kind, kap=kap, warp=1e-2)
    constant_integrand(store, "f.h", SMALL, 1.0)
    assert fn.values(store, [x])[0] == pytest.approx(expected, abs=1e-8)


def test_errors_and_round_trip():
    fn, store = make("general_concave")
    with pytest.raises(ValueError, match="defined on"):
        fn.values(store, [2.5])
    m, ms = make("monotone_concave")
    with pytest.raises(ValueError, match="x >= 0"):
        m.values(ms, [-1.0])
    with pytest.raises(ValueError, match="tilt"):
        ShapeFn("monotone_concave", "end_to_end", "f", kappa=0.1)
    with pytest.raises(ValueError, match="kind"):
        ShapeFn("convex", "end_to_end", "f")
    back = ShapeFn.from_json(m.to_json())
    np.testing.assert_array_equal(back.values(ms, [0.5, 1.5]), m.values(ms, [0.5, 1.5]))
