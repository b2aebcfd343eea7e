import warnings

import numpy as np
import pytest

from dorm.data_model import FitConfig, SourceDataset, TargetDataset
from dorm.density_ratio import (RatioModel, Reference, SmallTargetError, WModel, build_reference,
                                fit_source_ratios, fit_w, odds_ratio, ratio_matrix)
from dorm.mixture_weights import posterior_eta
from dorm.regressors import fit_logistic


def _site(name, n, mean=0.0, d=1, seed=0):
    r = np.random.default_rng(seed)
    A = np.column_stack([np.ones(n), r.normal(mean, 1.0, size=(n, d))])
    return SourceDataset(name, A, None, np.zeros(0))


def _whole_reference(X_ref, n_sources=1, n_pos=None):
    rows = tuple(np.arange(n) for n in n_pos)
    return Reference(X_ref, rows, tuple(np.arange(0) for _ in range(n_sources)), "pooled_split")


def test_largest_source_reference():
    big, small = _site("big", 2000), _site("small", 500, seed=1)
    ref = build_reference([small, big], "largest_source")
    assert ref.self_site == 1
    np.testing.assert_array_equal(ref.X, big.X)


def test_pooled_split_sizes_and_disjointness():
    srcs = [_site("a", 2000), _site("b", 2000, seed=1)]
    ref = build_reference(srcs, "pooled_split", 0.5, seed=3)
    assert ref.n == 2000
    for l in range(2):
        assert len(ref.reference_rows[l]) == 1000 and len(ref.source_rows[l]) == 1000
        assert not set(ref.reference_rows[l]) & set(ref.source_rows[l])
    again = build_reference(srcs, "pooled_split", 0.5, seed=3)
    for a, b in zip(ref.reference_rows + ref.source_rows, again.reference_rows + again.source_rows):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("f", [0.0, 1.0, -0.2, 1.5])
def test_pooled_split_fraction_must_be_interior(f):
    with pytest.raises(ValueError):
        build_reference([_site("a", 10)], "pooled_split", f)


def test_identical_laws_give_unit_ratio():
    src = _site("s", 5000, seed=1)
    ref_X = _site("r", 5000, seed=2).X
    models = fit_source_ratios([src], _whole_reference(ref_X, 1, [5000]), FitConfig())
    assert np.mean(np.abs(models[0].evaluate(ref_X) - 1.0)) <= 0.1


def test_odds_arithmetic():
    assert odds_ratio(2 / 3) == pytest.approx(2.0)
    assert odds_ratio(0.5, prior_ratio=3.0) == pytest.approx(3.0)


def test_gaussian_ratio_matches_analytic_oracle():
    src = _site("s", 10000, mean=1.0, seed=3)
    ref_X = _site("r", 10000, mean=0.0, seed=4).X
    model = fit_source_ratios([src], _whole_reference(ref_X, 1, [10000]), FitConfig())[0]
    x = ref_X[:, 1]
    assert np.mean((model.evaluate(ref_X) - np.exp(x - 0.5)) ** 2) <= 0.05


def test_mixture_ratio_single_source_is_one():
    r1 = RatioModel(None, 1.7, 50.0)
    w = WModel("mixture_ratio", 0, [r1], rho=np.array([1.0]))
    np.testing.assert_allclose(w.evaluate(np.ones((4, 2))), 1.0)


def test_mixture_ratio_arithmetic():
    ratios = [RatioModel(None, 2.0, 50.0), RatioModel(None, 1.0, 50.0)]
    X = np.ones((3, 2))
    w1 = WModel("mixture_ratio", 0, ratios, rho=np.array([0.5, 0.5])).evaluate(X)
    w2 = WModel("mixture_ratio", 1, ratios, rho=np.array([0.5, 0.5])).evaluate(X)
    np.testing.assert_allclose(w1, 0.75)
    np.testing.assert_allclose(w2, 1.5)


def test_direct_ratio_recovers_unit_weight_when_target_is_source_one():
    s1, s2 = _site("s1", 5000, 0.0, seed=5), _site("s2", 5000, 1.0, seed=6)
    tgt_X = _site("t", 5000, 0.0, seed=7).X
    target = TargetDataset(tgt_X[:, :2], None)
    cfg = FitConfig(w_option="direct_ratio")
    ref = build_reference([s1, s2], "pooled_split", 0.5, seed=1)
    ratios = fit_source_ratios([s1, s2], ref, cfg, seed=2)
    ws = fit_w(target, [s1, s2], ratios, np.array([1.0, 0.0]), ref, cfg, seed=3)
    draws = _site("s1b", 5000, 0.0, seed=8).X
    assert np.mean(np.abs(ws[0].evaluate(draws) - 1.0)) <= 0.15


def test_direct_ratio_refuses_small_target():
    s1 = _site("s1", 100)
    ref = build_reference([s1], "pooled_split", 0.5)
    ratios = fit_source_ratios([s1], ref, FitConfig())
    target = TargetDataset(_site("t", 10).A, None)
    with pytest.raises(SmallTargetError, match="mixture_ratio"):
        fit_w(target, [s1], ratios, None, ref, FitConfig(w_option="direct_ratio"))


def test_mixture_ratio_requires_rho():
    with pytest.raises(ValueError):
        fit_w(TargetDataset(np.ones((30, 1)), None), [], [], None, None, FitConfig())


def test_clipping_bounds_hold_exactly():
    srcs = [_site("a", 400, -3.0, seed=1), _site("b", 400, 3.0, seed=2)]
    cfg = FitConfig(ratio_clip=5.0, classifier_penalty=[1e-8])
    ref = build_reference(srcs, "pooled_split", 0.5)
    ratios = fit_source_ratios(srcs, ref, cfg)
    X = np.column_stack([np.ones(101), np.linspace(-20, 20, 101)])
    R = ratio_matrix(ratios, X)
    assert R.min() >= 1 / 5.0 and R.max() <= 5.0
    assert R.min() == 1 / 5.0 and R.max() == 5.0
    w = WModel("mixture_ratio", 0, ratios, rho=np.array([0.5, 0.5]), clip=5.0).evaluate(X)
    assert w.min() >= 1 / 25.0 and w.max() <= 25.0


def test_mixture_ratio_identity():
    srcs = [_site(n, 600, m, seed=i) for i, (n, m) in enumerate([("a", -1), ("b", 0), ("c", 1.5)])]
    ref = build_reference(srcs, "pooled_split", 0.5)
    ratios = fit_source_ratios(srcs, ref, FitConfig())
    rho = np.array([0.2, 0.5, 0.3])
    X = _site("x", 300, 0.3, seed=9).X
    R = ratio_matrix(ratios, X)
    eta = posterior_eta(rho, R)
    ws = np.column_stack([WModel("mixture_ratio", l, ratios, rho).evaluate(X, R) for l in range(3)])
    total = np.sum(eta * ws * R / (R @ rho)[:, None], axis=1)
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_label_swap_inverts_ratio():
    r = np.random.default_rng(10)
    X = np.r_[r.normal(0.7, 1, (800, 2)), r.normal(0, 1, (800, 2))]
    g = np.r_[np.ones(800), np.zeros(800)]
    a = fit_logistic(X, g, lambda_grid=[1e-12])
    b = fit_logistic(X, 1 - g, lambda_grid=[1e-12])
    pts = r.normal(size=(50, 2))
    ra = np.exp(a.decision_function(pts))
    rb = np.exp(b.decision_function(pts))
    np.testing.assert_allclose(ra, 1 / rb, rtol=1e-6)


def test_small_target_falls_back_to_mixture_ratio(small_sim):
    from dorm.dr_estimation import fit_nuisances
    p, sources, st = small_sim
    tiny = TargetDataset(st.target.A0[:15], st.target.W0[:15])
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        nb = fit_nuisances(sources, tiny, FitConfig(w_option="direct_ratio"), seed=1)
    assert "w_fallback_mixture_ratio" in nb.flags
    assert any("mixture_ratio" in str(w.message) for w in rec)
    assert nb.w_models[0].option == "mixture_ratio"
