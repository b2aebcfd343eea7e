import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dorm.data_model import DataValidationError, FitConfig, TuningSample
from dorm.estimator import DORMRegressor
from dorm.pipeline import fit_dorm
from dorm.tuning import DEFAULT_GRID


def test_params_round_trip_through_config():
    est = DORMRegressor(s_max=0.3, seed=7, ratio_clip=20.0)
    cfg = est.to_config()
    assert isinstance(cfg, FitConfig) and cfg.s_max_grid == (0.3,) and cfg.seed == 7
    again = DORMRegressor.from_config(cfg)
    assert again.get_params() == est.get_params()
    assert clone(est).get_params() == est.get_params()


def test_fit_matches_pipeline(small_sim):
    p, sources, st = small_sim
    est = DORMRegressor(s_max=0.2, seed=5).fit(sources, st.target)
    ref = fit_dorm(sources, st.target, FitConfig(s_max=0.2, seed=5)).model(0.2)
    np.testing.assert_array_equal(est.coef_, ref.coef)
    assert est.s_max_ == 0.2 and est.tuning_ is None
    assert est.n_features_in_ == p.q
    assert abs(est.rho_.sum() - 1) <= 1e-10
    np.testing.assert_allclose(est.predict(st.target.A0), st.target.A0 @ est.coef_)


def test_zero_smax_predicts_with_the_mix_coefficient(small_sim):
    _, sources, st = small_sim
    est = DORMRegressor(s_max=0.0, seed=2).fit(sources, st.target)
    mix = np.mean([b.beta_mix for b in est.fit_.betasets], axis=0)
    np.testing.assert_array_equal(est.coef_, mix)


def test_grid_uses_tuning_override(small_sim):
    _, sources, st = small_sim
    tun = st.target.tuning
    custom = TuningSample(tun.A, y=tun.A @ np.r_[1.0, np.zeros(tun.A.shape[1] - 1)])
    est = DORMRegressor(s_max=DEFAULT_GRID, seed=1).fit(sources, st.target, tuning=custom)
    assert est.tuning_ is not None and est.s_max_ in DEFAULT_GRID
    assert est.tuning_.scores[est.s_max_] == min(est.tuning_.scores.values())


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        DORMRegressor().predict(np.ones((2, 3)))


def test_predict_checks_columns(small_fit, small_sim):
    _, sources, st = small_sim
    est = DORMRegressor(s_max=0.2, seed=5).fit(sources, st.target)
    with pytest.raises(ValueError, match="columns"):
        est.predict(np.ones((3, est.n_features_in_ + 1)))
    with pytest.raises(ValueError):
        est.predict(np.full((2, est.n_features_in_), np.nan))


def test_target_type_is_checked(small_sim):
    _, sources, st = small_sim
    with pytest.raises(DataValidationError):
        DORMRegressor().fit(sources, st.target.A0)


def test_score_is_r_squared(small_sim):
    _, sources, st = small_sim
    est = DORMRegressor(s_max=0.1, seed=3).fit(sources, st.target)
    A, y = st.target.A0, st.y
    pred = A @ est.coef_
    r2 = 1 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
    assert est.score(A, y) == pytest.approx(r2, rel=1e-12)
