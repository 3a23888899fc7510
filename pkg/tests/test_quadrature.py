import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from submodnet import quadrature as q
from submodnet.diffgraph import Node, ParamStore, backward, exp, sum_
from submodnet.quadrature import QuadratureSpec, double_integral, integrate_cumulative, integrate_tail

CC = QuadratureSpec("clenshaw_curtis", 33, 2.0)
TRAP = QuadratureSpec("trapezoid", 65, 2.0)


def one(b):
    return b * 0.0 + 1.0


def decay(b):
    return exp(b * -1.0)


def _x(v):
    s = ParamStore()
    return s.add("x", np.atleast_1d(np.asarray(v, dtype=float)))


@pytest.mark.parametrize("spec", [CC, TRAP], ids=["cc", "trap"])
def test_zero_integrand(spec):
    assert integrate_cumulative(lambda b: b * 0.0, np.array([1.3]), spec).value[0] == 0.0


@pytest.mark.parametrize("spec", [CC, TRAP], ids=["cc", "trap"])
def test_constant_is_exact(spec):
    assert integrate_cumulative(one, np.array([1.5]), spec).value[0] == pytest.approx(1.5, abs=1e-10)


@pytest.mark.parametrize("x", [0.3, 1.0, 1.7])
def test_linear_is_exact(x):
    for spec in (CC, TRAP):
        got = integrate_cumulative(lambda b: b * 3.0 + 1.0, np.array([x]), spec).value[0]
        assert got == pytest.approx(1.5 * x * x + x, abs=1e-10)


def test_cumulative_exponential_and_leibniz():
    x = _x(1.0)
    out = integrate_cumulative(decay, x, CC)
    assert out.value[0] == pytest.approx(1 - math.exp(-1), abs=1e-6)
    backward(sum_(out))
    assert x.grad[0] == pytest.approx(math.exp(-1), abs=1e-6)


def test_tail_values_and_derivative():
    assert integrate_tail(one, np.array([2.0]), CC).value[0] == 0.0
    assert integrate_tail(one, np.array([0.0]), CC).value[0] == pytest.approx(2.0, abs=1e-12)
    x = _x(0.5)
    out = integrate_tail(decay, x, QuadratureSpec(b_max=20.0))
    assert out.value[0] == pytest.approx(math.exp(-0.5) - math.exp(-20), abs=1e-6)
    backward(sum_(out))
    assert x.grad[0] == pytest.approx(-math.exp(-0.5), abs=1e-6)


def test_tail_clamps_past_b_max():
    q.events.clear()
    out = integrate_tail(one, np.array([2.5, 1.0]), CC)
    np.testing.assert_allclose(out.value, [0.0, 1.0], atol=1e-12)
    assert q.events["tail_clamp"] == 1


@pytest.mark.parametrize("method", ["nested", "swapped"])
def test_double_integral_oracles(method):
    assert double_integral(one, np.array([0.0]), CC, method=method).value[0] == 0.0
    assert double_integral(one, np.array([1.0]), CC, method=method).value[0] == pytest.approx(1.5, abs=1e-10)
    big = QuadratureSpec(nodes=65, b_max=30.0)
    got = double_integral(decay, np.array([1.0]), big, method=method).value[0]
    assert got == pytest.approx(1 - math.exp(-1), abs=1e-6)


@pytest.mark.parametrize("method", ["nested", "swapped"])
def test_tilted_double_integral(method):
    # integral of exp(0.1 a) (2 - a) over [0, 1]
    exact = 10 * (2 * math.exp(0.1) - 2) - (10 * math.exp(0.1) - 100 * (math.exp(0.1) - 1))
    got = double_integral(one, np.array([1.0]), CC, kappa=0.1, method=method).value[0]
    assert exact == pytest.approx(1.5688009883, abs=1e-9)
    assert got == pytest.approx(exact, abs=1e-9)


@pytest.mark.parametrize("kappa", [0.0, 0.3])
def test_methods_agree_with_gradients(kappa):
    s = ParamStore()
    w = s.add("w", 0.7)
    x = s.add("x", np.array([0.4, 1.3]))
    f = lambda b: exp(b * w * -1.0) * (b + 1.0)
    a = double_integral(f, x, CC, kappa=kappa, method="nested")
    backward(sum_(a))
    ga = (w.grad.copy(), x.grad.copy())
    b = double_integral(f, x, CC, kappa=kappa, method="swapped")
    backward(sum_(b))
    np.testing.assert_allclose(a.value, b.value, atol=1e-9)
    np.testing.assert_allclose(ga[0], w.grad, atol=1e-8)
    np.testing.assert_allclose(ga[1], x.grad, atol=1e-8)


def test_trapezoid_second_order():
    errs = []
    for n in (9, 17, 33, 65):
        spec = QuadratureSpec("trapezoid", n, 2.0)
        got = integrate_cumulative(lambda b: exp(b * 0.0) * 0.0 + np.cos(b.value), np.array([2.0]), spec)
        errs.append(abs(got.value[0] - math.sin(2.0)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9)


@pytest.mark.parametrize("rule", ["clenshaw_curtis", "trapezoid"])
def test_refinement_reduces_error(rule):
    prev = math.inf
    for n in (5, 9, 17, 33):
        spec = QuadratureSpec(rule, n, 20.0)
        err = abs(integrate_tail(decay, np.array([0.0]), spec).value[0] - (1 - math.exp(-20)))
        assert err < prev
        prev = err


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=2, max_size=8), st.floats(0.1, 3.0))
def test_monotone_in_x_for_positive_integrands(xs, c):
    xs = np.sort(np.array(xs))
    f = lambda b: exp(b * -c) + 0.1
    cum = integrate_cumulative(f, xs, CC).value
    tail = integrate_tail(f, xs, CC).value
    assert np.all(np.diff(cum) >= -1e-12)
    assert np.all(np.diff(tail) <= 1e-12)


def test_spec_validation():
    with pytest.raises(ValueError, match="odd"):
        QuadratureSpec("clenshaw_curtis", 32)
    with pytest.raises(ValueError, match="b_max"):
        QuadratureSpec(b_max=math.inf)
    with pytest.raises(ValueError, match="3 nodes"):
        QuadratureSpec("trapezoid", 2)
    with pytest.raises(ValueError, match="x >= 0"):
        integrate_cumulative(one, np.array([-0.1]), CC)
    with pytest.raises(FloatingPointError):
        integrate_cumulative(lambda b: b * np.nan, np.array([1.0]), CC)


WARP = q.LogWarp(1e-3)


@pytest.mark.parametrize("method", ["nested", "swapped"])
def test_warp_preserves_closed_forms(method):
    far = QuadratureSpec(b_max=20.0)
    assert integrate_cumulative(decay, np.array([1.0]), far, WARP).value[0] == pytest.approx(1 - math.exp(-1), abs=1e-8)
    assert integrate_tail(one, np.array([0.5]), CC, WARP).value[0] == pytest.approx(1.5, abs=1e-10)
    got = double_integral(one, np.array([1.0]), CC, method=method, warp=WARP).value[0]
    assert got == pytest.approx(1.5, abs=1e-8)


def test_warp_leibniz():
    far = QuadratureSpec(b_max=20.0)
    for x0 in (1e-4, 0.3, 1.7):
        x = _x(x0)
        backward(sum_(integrate_cumulative(decay, x, far, WARP)))
        assert x.grad[0] == pytest.approx(math.exp(-x0), abs=1e-9)


def test_warp_resolves_peak_near_zero():
    # int_0^1 du / (u + w) = log(1 + 1/w); the peak has width w
    w = WARP.width
    f = lambda u: (u + w) ** -1.0
    exact = math.log1p(1 / w)
    plain = abs(integrate_cumulative(f, np.array([1.0]), CC).value[0] - exact)
    warped = abs(integrate_cumulative(f, np.array([1.0]), CC, WARP).value[0] - exact)
    assert warped < 1e-10 < 1e-3 < plain


@pytest.mark.parametrize("width", [0.0, -1.0, math.inf])
def test_warp_rejects_width(width):
    with pytest.raises(ValueError):
        q.LogWarp(width)
