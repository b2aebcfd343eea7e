import numpy as np
import pytest

from dorm.simulation import (SimParams, draw_outcomes, evaluate, generate_sources, generate_target,
                             oracle_beta, oracle_eta, oracle_ratios, oracle_w, structural_map,
                             uniform_simplex)
from dorm._rng import substream

SMALL = dict(N_l=400, n_l=100, N_0=400, p=20)


def test_structural_columns_vanish_without_coupling():
    p = SimParams(k=0.0, noise_w=0.0, **SMALL)
    for ds in generate_sources(p):
        assert np.all(ds.W[:, :5] == 0.0)


def test_structural_map_formula():
    B = structural_map(5, 12, 0.3)
    A = np.array([[1.0, 2.0, 3.0, 4.0, 5.0]])
    W = A @ B.T
    np.testing.assert_allclose(W[0, :5], [0.3 * (1 - 3), 0.3 * (2 - 4), 0.9, 1.2, 1.2])
    assert np.all(W[0, 5:] == 0)


def test_zero_coefficients_and_noise_give_zero_outcomes():
    p = SimParams(alpha=np.zeros((5, 5)), gamma_w=np.zeros((5, 15)), noise_y=0.0, **SMALL)
    assert all(np.all(ds.y == 0) for ds in generate_sources(p))
    assert np.all(generate_target(p).y == 0)


def test_covariate_means_follow_the_site_means():
    p = SimParams(N_l=100_000, n_l=10, p=5)
    for l, ds in enumerate(generate_sources(p)):
        assert np.all(ds.A[:, 0] == 1.0)
        assert np.max(np.abs(ds.A[:, 1:].mean(axis=0) - p.mu[l, 1:])) <= 0.02


def test_source_shapes_and_labels():
    p = SimParams(**SMALL)
    srcs = generate_sources(p)
    assert len(srcs) == p.L
    for ds in srcs:
        assert ds.n_total == 400 and ds.n_labeled == 100
        assert ds.A.shape == (400, p.q) and ds.W.shape == (400, p.p - p.q)


def test_pure_site_one_target_has_site_one_regression():
    p = SimParams(rho_star=(1, 0, 0, 0, 0), s_star=0.0)
    # E[Y | A] is linear for a single site, so the population regression is theta_1
    star = oracle_beta(p, "target", 100_000, seed=1, noisy=True)
    assert np.max(np.abs(star - p.theta[0])) <= 0.02
    src = oracle_beta(p, ("source", 0), 100_000, seed=2, noisy=True)
    assert np.max(np.abs(star - src)) <= 0.02


def test_full_violation_uses_the_delta_site_everywhere():
    p = SimParams(s_star=1.0, delta_star=(0, 1, 0, 0, 0), noise_y=0.0, N_0=500, **{
        k: v for k, v in SMALL.items() if k != "N_0"})
    st = generate_target(p)
    A, W = st.target.A0, st.target.W0
    np.testing.assert_allclose(st.y, A @ p.alpha[1] + W @ p.gamma_w[1], rtol=0, atol=1e-12)


def test_latent_site_frequencies_match_mixture_weights():
    p = SimParams(N_0=100_000, n_l=10, p=5, rho_star=(0.1, 0.2, 0.3, 0.15, 0.25))
    st = generate_target(p)
    freq = np.bincount(st.site, minlength=5) / 100_000
    assert np.max(np.abs(freq - p.rho_star)) <= 0.01


def test_target_covariates_shared_across_violation_levels():
    a = generate_target(SimParams(s_star=0.0, **SMALL))
    b = generate_target(SimParams(s_star=0.4, contamination="conditional_mix", **SMALL))
    np.testing.assert_array_equal(a.target.A0, b.target.A0)
    np.testing.assert_array_equal(a.target.tuning.A, b.target.tuning.A)


def test_generation_is_deterministic():
    p = SimParams(seed=5, **SMALL)
    a, b = generate_sources(p), generate_sources(p)
    for x, y in zip(a, b):
        assert x.A.tobytes() == y.A.tobytes() and x.y.tobytes() == y.y.tobytes()
    c = generate_sources(p.replace(seed=6))
    assert a[0].A.tobytes() != c[0].A.tobytes()


def test_simplex_validation():
    with pytest.raises(ValueError):
        SimParams(rho_star=(0.5, 0.6, 0, 0, 0))
    with pytest.raises(ValueError):
        SimParams(s_star=1.5)
    with pytest.raises(ValueError):
        SimParams(contamination="adversarial")


def test_random_delta_is_seeded_and_on_simplex():
    a = SimParams(delta_star="random", seed=3)
    b = SimParams(delta_star="random", seed=3)
    assert a.delta_star == b.delta_star
    assert abs(sum(a.delta_star) - 1) <= 1e-12 and min(a.delta_star) >= 0


def test_uniform_simplex_draws():
    r = np.random.default_rng(0)
    D = np.array([uniform_simplex(r, 4) for _ in range(20_000)])
    np.testing.assert_allclose(D.sum(axis=1), 1.0, rtol=1e-12)
    # uniform on the simplex: each coordinate is Beta(1, L - 1), mean 1/L, var (L-1)/(L^2 (L+1))
    np.testing.assert_allclose(D.mean(axis=0), 0.25, atol=0.01)
    np.testing.assert_allclose(D.var(axis=0), 3 / 80, atol=0.003)


def test_oracle_eta_and_ratios_are_consistent():
    p = SimParams()
    A = generate_target(p.replace(N_0=200, n_tuning=0)).target.A0
    R = oracle_ratios(p, A)
    eta = oracle_eta(p, A)
    rho = np.asarray(p.rho_star)
    np.testing.assert_allclose(eta, rho * R / (R @ rho)[:, None], rtol=1e-10, atol=1e-14)
    for l in (0, 2):
        np.testing.assert_allclose(oracle_w(p, A, l), (R @ rho) / R[:, l], rtol=1e-10)


def _intercept_scores(p, st, n_draws=30):
    coefs = {t: np.r_[t, np.zeros(p.q - 1)] for t in (0.0, 1.0, -1.0)}
    reps = evaluate(coefs, p, st, n_draws=n_draws, seed=4)
    return {t: r.per_draw for t, r in reps.items()}


def test_null_model_identity():
    p = SimParams(s_star=0.3, **SMALL)
    st = generate_target(p)
    f = _intercept_scores(p, st)
    # std(t) = (m2 - 2 t m1 + t^2) / V per draw, with V the average variance
    V = 2 / (f[1.0] + f[-1.0] - 2 * f[0.0])
    assert np.ptp(V) <= 1e-9 * V.mean()
    V = V.mean()
    m1 = -(f[1.0] - f[-1.0]) * V / 4
    m2 = f[0.0] * V
    var = m2 - m1 ** 2
    assert var.mean() == pytest.approx(V, rel=1e-9)
    # std(0) = var_b / V + m1_b^2 / V, and var_b / V averages to exactly 1
    assert np.mean(f[0.0] - m1 ** 2 / V) == pytest.approx(1.0, rel=1e-9)


def test_report_invariants():
    p = SimParams(**SMALL)
    st = generate_target(p)
    r = evaluate(np.zeros(p.q), p, st, n_draws=17, seed=0)
    assert r.per_draw.shape == (17,)
    assert r.std_mse_worst >= r.std_mse_mean
    with pytest.raises(ValueError):
        evaluate(np.zeros(p.q + 1), p, st)


def test_population_regression_beats_null_model():
    p = SimParams(s_star=0.0, N_0=2000, n_l=10, N_l=20, p=20)
    st = generate_target(p)
    star = oracle_beta(p, "target", 100_000, seed=3)
    assert np.any(star[1:] != 0)
    res = evaluate({"star": star, "null": np.zeros(p.q)}, p, st, n_draws=20, seed=1)
    assert res["star"].std_mse_mean < res["null"].std_mse_mean


def test_evaluate_is_deterministic():
    p = SimParams(s_star=0.2, **SMALL)
    st = generate_target(p)
    a = evaluate(np.ones(p.q), p, st, n_draws=10, seed=9).per_draw
    b = evaluate(np.ones(p.q), p, st, n_draws=10, seed=9).per_draw
    assert a.tobytes() == b.tobytes()


def test_oracle_report_fields():
    p = SimParams(**SMALL)
    st = generate_target(p)
    r = evaluate(np.zeros(p.q), p, st, n_draws=5, oracle=True, n_oracle=20_000)
    assert r.oracle_beta_star.shape == (p.q,)
    assert r.coef_error == pytest.approx(np.linalg.norm(r.oracle_beta_star))


def test_source_without_w_effect_recovers_alpha():
    gam = SimParams().gamma_w.copy()
    gam[2] = 0.0
    p = SimParams(gamma_w=gam)
    est = oracle_beta(p, ("source", 2), 100_000, seed=0, noisy=True)
    assert np.max(np.abs(est - p.alpha[2])) <= 0.02


def test_mixture_of_identical_sources_matches_single_source():
    base = SimParams()
    mu = base.mu.copy()
    mu[1] = mu[0]
    theta = base.theta.copy()
    theta[1] = theta[0]
    gam = base.gamma_w.copy()
    gam[1] = gam[0]
    p = SimParams(mu=mu, theta=theta, gamma_w=gam)
    single = oracle_beta(p, ("source", 0), 100_000, seed=1, noisy=True)
    mixed = oracle_beta(p, ("mixture", (0.5, 0.5, 0, 0, 0)), 100_000, seed=2, noisy=True)
    assert np.max(np.abs(single - mixed)) <= 0.02


def _oracle_sd(n, repeats=50):
    p = SimParams()
    est = np.array([oracle_beta(p, ("source", 1), n, seed=s, noisy=True) for s in range(repeats)])
    return est.std(axis=0, ddof=1).mean()


def test_oracle_standard_error_rate():
    base, double, quad = _oracle_sd(5000), _oracle_sd(10_000), _oracle_sd(20_000)
    print(f"oracle sd: n={base:.5f}, 2n={double:.5f}, 4n={quad:.5f}")
    # n^(-1/2): doubling divides the error by sqrt(2), quadrupling halves it
    assert 1.2 <= base / double <= 1.7
    assert 1.6 <= base / quad <= 2.5


def test_contamination_mean_lies_outside_source_span():
    p = SimParams(contamination="conditional_mix", s_star=1.0, noise_y=0.0, **SMALL)
    st = generate_target(p)
    A, W = st.target.A0, st.target.W0
    M = np.column_stack([A @ p.alpha[l] + W @ p.gamma_w[l] for l in range(p.L)])
    # best linear combination of source conditionals still misses the epsilon mean
    coef = np.linalg.lstsq(M, st.y, rcond=None)[0]
    resid = st.y - M @ coef
    assert np.mean(resid ** 2) > 0.05 * np.var(st.y)


def test_outcome_draw_uses_own_site_at_zero_violation():
    p = SimParams(noise_y=0.0, **SMALL)
    r = substream(0, "t")
    A = generate_sources(p)[3].A[:50]
    W = generate_sources(p)[3].W[:50]
    y = draw_outcomes(p, A, W, np.full(50, 3), p.delta_star, r, s_star=0.0)
    np.testing.assert_allclose(y, A @ p.alpha[3] + W @ p.gamma_w[3], atol=1e-12)


@pytest.mark.slow
def test_ordering_sanity_without_violation(default_study):
    d = default_study.query("setting == 'none' and violation == 0.0")
    m = d.groupby("method").std_mse_mean.mean()
    print(m.round(4).to_dict())
    assert m["rho_ave"] < m["simple_ave"] and m["dorm"] < m["simple_ave"]


@pytest.mark.slow
def test_worst_case_dominance_at_large_violation(default_study):
    d = default_study.query("setting == 'none' and violation == 0.35")
    w = d.pivot(index="rep", columns="method", values="std_mse_worst")
    frac = float(np.mean(w["dorm"] < w["rho_ave"]))
    print(f"DORM beats RhoAve in worst case in {frac:.2f} of replications")
    assert frac >= 0.8
