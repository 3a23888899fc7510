import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from submodnet.evalkit import (
    AuditReport, audit_concave, audit_monotone_grid, audit_submodular, jaccard_prefix, mean_jaccard,
    ndcg_at_10, random_mean_jaccard, rmse, sample_chains, write_reports,
)
from submodnet.planted import PlantedFn, sample_features


@pytest.mark.parametrize("p,t,expected", [
    ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.0),
    ([0.0, 0.0], [3.0, 4.0], math.sqrt(12.5)),
    ([2.0], [0.0], 2.0),
])
def test_rmse_examples(p, t, expected):
    assert rmse(p, t) == expected


def test_rmse_errors():
    with pytest.raises(ValueError, match="length"):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rmse([], [])


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20),
       st.randoms(use_true_random=False))
def test_rmse_reordering(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = rmse(*zip(*pairs))
    b = rmse(*zip(*shuffled))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seq,T,expected", [
    ([1, 2, 3, 9], [3, 2, 1], 1.0),
    ([4, 5, 6], [1, 2, 3], 0.0),
    ([1, 2, 7, 3], [1, 2, 3], 0.5),
])
def test_jaccard_examples(seq, T, expected):
    assert jaccard_prefix(seq, T) == expected


def test_mean_jaccard():
    assert mean_jaccard([[1, 2, 3], [4, 5, 6]], [[3, 2, 1], [1, 2, 3]]) == 0.5
    with pytest.raises(ValueError, match="shorter"):
        mean_jaccard([[1]], [[1, 2]])


@pytest.mark.parametrize("seq,T,expected", [
    (list(range(12)), [0, 1, 2], 1.0),
    (list(range(12)), list(range(20)), 1.0),
    (list(range(12)), [11], 0.0),
    ([5, 3, 8, 9], [3], 1 / math.log2(3)),
    ([1, 2], [], 0.0),
])
def test_ndcg_examples(seq, T, expected):
    assert ndcg_at_10(seq, T) == pytest.approx(expected, rel=1e-15)


def test_random_mean_jaccard_matches_simulation():
    rng = np.random.default_rng(0)
    sims = [jaccard_prefix(list(rng.permutation(30)), range(5)) for _ in range(40_000)]
    assert random_mean_jaccard(30, 5) == pytest.approx(np.mean(sims), abs=3e-3)
    assert random_mean_jaccard(5, 5) == 1.0


def test_concave_audit_examples():
    good = audit_concave(lambda x: -x ** 2, -1, 1, 101, 1e-9)
    bad = audit_concave(lambda x: x ** 2, -1, 1, 101, 1e-9)
    h = 2 / 100
    assert good.passed and not bad.passed
    assert bad.max_violation == pytest.approx(2 * h * h, rel=1e-9)
    assert not audit_monotone_grid(lambda x: -x, 0, 1).passed


def test_modular_audit_is_exactly_zero():
    t = sample_features(15, 3, 0)
    rep = audit_submodular(PlantedFn("modular"), t, 300, tol=0.0)
    assert abs(rep["submodular"].max_violation) < 1e-13


def test_log_and_cut_audits():
    t = sample_features(30, 10, 0)
    assert audit_submodular(PlantedFn("log"), t, 500, tol=1e-9)["submodular"].passed
    assert not audit_submodular(PlantedFn("gcut_nonmono"), t, 500)["monotone"].passed


def test_chain_shapes():
    chains = sample_chains(list(range(10)), 200, 4, np.random.default_rng(1), min_s=1)
    for S, T, s in chains:
        assert 1 <= len(S) < len(T) <= 4 and set(S) < set(T) and s not in T


@settings(max_examples=25)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1))
def test_report_pass_flag_matches_tolerance(viol, tol):
    from submodnet.evalkit import _report
    r = _report("x", np.array(viol), tol)
    assert r.passed == (r.max_violation <= tol)


def test_write_reports(tmp_path):
    import json
    write_reports(tmp_path / "a.json", {"x": AuditReport("x", 3, 0.0, 0.0, 1e-6, True)})
    assert json.loads((tmp_path / "a.json").read_text())["x"]["passed"] is True


def test_shape_audits_use_tilt_for_alpha_shapes():
    from submodnet.evalkit import shape_audits
    from submodnet.setfn import ModelConfig, build_model, calibrate

    table = sample_features(50, 4, 0)
    m = build_model(ModelConfig(kind="alpha", alpha=0.5, k=5, mode="end_to_end"), 4, 0)
    calibrate(m, table.zsums([table.ids]), table.Z)
    reports = shape_audits(m)
    assert "phihat.tilt" in reports and "phihat.concave" not in reports
    assert all(r.passed for r in reports.values())
