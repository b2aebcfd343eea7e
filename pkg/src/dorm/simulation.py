"""Synthetic multi-source data, oracle quantities and the evaluation harness."""

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from . import sim_constants as C
from ._rng import substream, subseed
from .data_model import FitConfig, SourceDataset, TargetDataset, TuningSample
from .pipeline import fit_dorm
from .tuning import DEFAULT_GRID, tune

CONTAMINATION = ("none", "conditional_mix", "joint")
METHODS = ("dorm", "simple_ave", "rho_ave", "maximin")
DEFAULT_LEVELS = DEFAULT_GRID


def _simplex_vec(v, name, L):
    v = np.asarray(v, dtype=float)
    if v.shape != (L,) or np.any(v < 0) or abs(v.sum() - 1) > 1e-10:
        raise ValueError(f"{name} must be a length-{L} simplex vector")
    return v


@dataclass(frozen=True, eq=False)
class SimParams:
    """Generator settings.

    ``alpha`` and ``gamma_w`` default to the constants-file design; pass
    ``theta`` instead of ``alpha`` to fix the effective coefficients.
    ``delta_star="random"`` draws one uniform simplex point from the seed.
    ``contamination`` selects the s*-weighted block: ``none`` mixes source
    conditionals by ``delta_star``; ``conditional_mix`` uses the nonlinear
    epsilon model; ``joint`` replaces whole (X, Y) draws by a shifted
    covariate law paired with the epsilon model.
    """

    L: int = C.L
    N_l: int = C.N_SOURCE
    n_l: int = C.N_LABELED
    N_0: int = C.N_TARGET
    n_tuning: int = C.N_TUNING
    p: int = C.P
    q: int = C.Q
    k: float = C.K
    noise_y: float = C.NOISE_Y
    noise_w: float = C.NOISE_W
    sigma_a: float = C.SIGMA_A
    mu: np.ndarray = None
    alpha: np.ndarray = None
    gamma_w: np.ndarray = None
    theta: np.ndarray = None
    rho_star: tuple = C.RHO_STAR
    s_star: float = 0.0
    delta_star: object = C.DELTA_STAR
    contamination: str = "none"
    eps_flip: float = C.EPS_FLIP
    eps_quadratic: float = C.EPS_QUADRATIC
    joint_shift: float = C.JOINT_SHIFT
    seed: int = 0

    def __post_init__(self):
        L, q, p = self.L, self.q, self.p
        if q < 1 or p < q or L < 1:
            raise ValueError("need L >= 1 and 1 <= q <= p")
        if not 1 <= self.n_l <= self.N_l:
            raise ValueError("need 1 <= n_l <= N_l")
        mu = C.default_mu(L, q) if self.mu is None else np.array(self.mu, dtype=float)
        mu[:, 0] = 1.0
        gam = C.default_gamma(L, p, q) if self.gamma_w is None else np.array(self.gamma_w, dtype=float)
        B = structural_map(q, p, self.k)
        if self.alpha is not None:
            alpha = np.array(self.alpha, dtype=float)
            if self.theta is not None and not np.allclose(alpha + gam @ B, self.theta):
                raise ValueError("alpha and theta are inconsistent; pass only one")
        else:
            theta = C.default_theta(L, q) if self.theta is None else np.array(self.theta, dtype=float)
            alpha = theta - gam @ B
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "gamma_w", gam)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "theta", alpha + gam @ B)
        if mu.shape != (L, q) or alpha.shape != (L, q) or gam.shape != (L, p - q):
            raise ValueError("mu, alpha, gamma_w shapes must be L x q, L x q, L x (p - q)")
        object.__setattr__(self, "rho_star", tuple(_simplex_vec(self.rho_star, "rho_star", L)))
        if isinstance(self.delta_star, str):
            if self.delta_star != "random":
                raise ValueError("delta_star must be a simplex vector or 'random'")
            d = uniform_simplex(substream(self.seed, "delta-star"), L)
        else:
            d = _simplex_vec(self.delta_star, "delta_star", L)
        object.__setattr__(self, "delta_star", tuple(d))
        if not 0 <= self.s_star <= 1:
            raise ValueError("s_star must lie in [0, 1]")
        if self.contamination not in CONTAMINATION:
            raise ValueError(f"contamination must be one of {CONTAMINATION}")

    def replace(self, **kw):
        # alpha and theta are two views of one setting; theta is kept when
        # only the W map changes
        if "theta" in kw:
            kw.setdefault("alpha", None)
        elif "alpha" in kw:
            kw.setdefault("theta", None)
        elif "gamma_w" in kw or "k" in kw:
            kw["alpha"] = None
        return dataclasses.replace(self, **kw)

    @property
    def B(self):
        return structural_map(self.q, self.p, self.k)

    @property
    def w_noise_sd(self):
        """Standard deviation of gamma_l' (W - E[W|A]) per site."""
        return self.noise_w * np.linalg.norm(self.gamma_w, axis=1)


def structural_map(q, p, k):
    """B with E[W | A] = A B' : W1 = k(A1 - A3), W2 = k(A2 - A4), W3 = kA3,
    W4 = W5 = kA4 (1-based, A1 the intercept); other columns zero."""
    B = np.zeros((p - q, q))
    rows = [((0, 1.0), (2, -1.0)), ((1, 1.0), (3, -1.0)), ((2, 1.0),), ((3, 1.0),), ((3, 1.0),)]
    for i, terms in enumerate(rows[:p - q]):
        if all(j < q for j, _ in terms):
            for j, c in terms:
                B[i, j] = k * c
    return B


def uniform_simplex(rng, L):
    """Uniform draw on the simplex from normalized exponential spacings."""
    e = rng.exponential(size=L)
    return e / e.sum()


# ---------------------------------------------------------------- covariates

def draw_A(params, site, n, rng):
    A = rng.normal(size=(n, params.q)) * params.sigma_a + params.mu[site]
    A[:, 0] = 1.0
    return A


def draw_W(params, A, rng):
    pw = params.p - params.q
    return A @ params.B.T + params.noise_w * rng.normal(size=(A.shape[0], pw))


def log_density_A(params, A):
    """n x L log densities of the non-intercept coordinates of A per site."""
    Z = (A[:, None, 1:] - params.mu[None, :, 1:]) / params.sigma_a
    d = params.q - 1
    return -0.5 * np.sum(Z * Z, axis=2) - d * np.log(params.sigma_a * np.sqrt(2 * np.pi))


def oracle_eta(params, A, rho=None):
    rho = np.asarray(params.rho_star if rho is None else rho, dtype=float)
    with np.errstate(divide="ignore"):
        lw = log_density_A(params, A) + np.log(rho)
    return np.exp(lw - logsumexp(lw, axis=1, keepdims=True))


def oracle_ratios(params, A):
    """r_l(x) = p_l(x) / pbar(x) with pbar the equal mixture of sources."""
    ld = log_density_A(params, A)
    ref = logsumexp(ld, axis=1, keepdims=True) - np.log(params.L)
    return np.exp(ld - ref)


def oracle_w(params, A, l, rho=None):
    """Target-vs-source-l covariate ratio under mixture weights ``rho``."""
    rho = np.asarray(params.rho_star if rho is None else rho, dtype=float)
    ld = log_density_A(params, A)
    with np.errstate(divide="ignore"):
        num = logsumexp(ld + np.log(rho), axis=1)
    return np.exp(num - ld[:, l])


# ---------------------------------------------------------------- outcomes

def m_source(params, A, W, l):
    return A @ params.alpha[l] + W @ params.gamma_w[l]


def m_eps(params, A, W):
    """Epsilon-model conditional mean: the mixture-faithful mean flipped and
    scaled by ``eps_flip``, plus a centered quadratic in the first
    non-intercept coordinate."""
    M = _cond_means(params, A, W)
    j = 1 if params.q > 1 else 0
    faithful = np.sum(oracle_eta(params, A) * M, axis=1)
    return -params.eps_flip * faithful + _quad(params, A[:, j])


def _quad(params, a):
    mu2 = params.sigma_a ** 2
    return params.eps_quadratic * (a ** 2 - mu2)


def _cond_means(params, A, W):
    return np.column_stack([m_source(params, A, W, l) for l in range(params.L)])


def draw_outcomes(params, A, W, site, delta, rng, s_star=None, contaminated=None):
    """Y = conditional mean of the drawn component + noise.

    With probability 1 - s* the component is the row's own latent site
    (equivalent to drawing from eta(X; rho*)); otherwise it is a site drawn
    from ``delta`` or, under contamination, the epsilon model.
    ``contaminated`` marks rows already drawn from the joint contamination
    law; they always use the epsilon model.
    """
    s = params.s_star if s_star is None else s_star
    n = A.shape[0]
    delta = np.asarray(delta, dtype=float)
    M = _cond_means(params, A, W)
    u = rng.random(n)
    alt_site = rng.choice(params.L, size=n, p=delta)
    eps = params.noise_y * rng.normal(size=n)
    own = M[np.arange(n), site]
    if params.contamination == "none":
        alt = M[np.arange(n), alt_site]
    else:
        alt = m_eps(params, A, W)
    if params.contamination == "joint":
        cont = np.zeros(n, dtype=bool) if contaminated is None else contaminated
        return np.where(cont, alt, own) + eps
    return np.where(u < 1 - s, own, alt) + eps


# ---------------------------------------------------------------- generators

def generate_sources(params):
    out = []
    for l in range(params.L):
        rng = substream(params.seed, "source", l)
        A = draw_A(params, l, params.N_l, rng)
        W = draw_W(params, A, rng)
        n = params.n_l
        y = m_source(params, A[:n], W[:n], l) + params.noise_y * rng.normal(size=n)
        out.append(SourceDataset(f"site{l + 1}", A, W, y))
    return out


@dataclass(frozen=True, eq=False)
class SimTarget:
    """Target data with the hidden pieces needed for scoring."""

    target: TargetDataset
    site: np.ndarray
    contaminated: np.ndarray
    y: np.ndarray
    tuning_site: np.ndarray
    tuning_contaminated: np.ndarray
    tuning_W: np.ndarray

    def to_hidden(self):
        return {"site": self.site, "contaminated": self.contaminated, "y": self.y}


def _target_covariates(params, n, rng):
    site = rng.choice(params.L, size=n, p=np.asarray(params.rho_star))
    A = np.empty((n, params.q))
    for l in range(params.L):
        idx = np.flatnonzero(site == l)
        if idx.size:
            A[idx] = draw_A(params, l, idx.size, rng)
    cont = np.zeros(n, dtype=bool)
    if params.contamination == "joint" and params.s_star > 0:
        cont = rng.random(n) < params.s_star
        shift = params.joint_shift * np.eye(params.q)[min(1, params.q - 1)]
        A[cont] = rng.normal(size=(cont.sum(), params.q)) * params.sigma_a + shift
        A[cont, 0] = 1.0
    W = draw_W(params, A, rng)
    return A, W, site, cont


def generate_target(params, tuning_outcome="y", surrogate_noise=1.0):
    """Target covariates from the latent-site mixture, hidden outcomes under
    ``delta_star``, and a labeled (or surrogate) tuning sample.

    Covariates depend only on the seed and the covariate settings, so the
    same seed gives the same target rows at every s* and contamination level.
    """
    rng = substream(params.seed, "target", "covariates")
    A, W, site, cont = _target_covariates(params.replace(contamination="none"), params.N_0, rng)
    if params.contamination == "joint":
        A, W, site, cont = _target_covariates(params, params.N_0,
                                              substream(params.seed, "target", "joint"))
    y = draw_outcomes(params, A, W, site, params.delta_star,
                      substream(params.seed, "target", "y"), contaminated=cont)
    tuning, tsite, tcont, tW = None, None, None, None
    if params.n_tuning:
        trng = substream(params.seed, "tuning", "covariates")
        base = params if params.contamination == "joint" else params.replace(contamination="none")
        tA, tW, tsite, tcont = _target_covariates(base, params.n_tuning, trng)
        ty = draw_outcomes(params, tA, tW, tsite, params.delta_star,
                           substream(params.seed, "tuning", "y", params.s_star), contaminated=tcont)
        if tuning_outcome == "y":
            tuning = TuningSample(tA, y=ty)
        else:
            srng = substream(params.seed, "tuning", "surrogate", params.s_star)
            tuning = TuningSample(tA, s=ty + surrogate_noise * srng.normal(size=ty.size))
    target = TargetDataset(A, W, tuning)
    return SimTarget(target, site, cont, y, tsite, tcont, tW)


def tuning_sample(params, sim_target, s_star, tuning_outcome="y", surrogate_noise=1.0, delta=None):
    """Fresh tuning labels at violation ``s_star`` on the stored tuning rows."""
    tun = sim_target.target.tuning
    p = params.replace(s_star=s_star)
    d = params.delta_star if delta is None else delta
    ty = draw_outcomes(p, tun.A, sim_target.tuning_W, sim_target.tuning_site, d,
                       substream(params.seed, "tuning", "y", s_star),
                       contaminated=sim_target.tuning_contaminated)
    if tuning_outcome == "y":
        return TuningSample(tun.A, y=ty)
    srng = substream(params.seed, "tuning", "surrogate", s_star)
    return TuningSample(tun.A, s=ty + surrogate_noise * srng.normal(size=ty.size))


# ---------------------------------------------------------------- oracles

def _oracle_A(params, n, rng, weights=None):
    weights = np.asarray(params.rho_star if weights is None else weights, dtype=float)
    site = rng.choice(params.L, size=n, p=weights)
    A = np.empty((n, params.q))
    for l in range(params.L):
        idx = np.flatnonzero(site == l)
        if idx.size:
            A[idx] = draw_A(params, l, idx.size, rng)
    return A, site


def _mean_given_A(params, A, l):
    return A @ params.theta[l]


def oracle_beta(params, population="target", n_oracle=100_000, seed=0, noisy=False):
    """Least-squares coefficient of Y on A over a Monte Carlo draw.

    ``population`` is ``"target"`` (mixture covariates, outcome law from
    ``params``), ``("source", l)``, ``("mixture", weights)`` with each row's
    outcome from its own site, or ``("target_m", l)`` for the population
    coefficient of m_l on target covariates. ``noisy=False`` regresses the
    conditional mean given A, ``noisy=True`` regresses sampled outcomes.
    The W part enters through its A-projection plus independent noise, so
    no W columns are materialized.
    """
    rng = substream(seed, "oracle", str(population), n_oracle, noisy)
    sd_w = params.w_noise_sd
    if isinstance(population, tuple) and population[0] == "source":
        l = int(population[1])
        A = draw_A(params, l, n_oracle, rng)
        y = _mean_given_A(params, A, l)
        if noisy:
            y = y + np.sqrt(params.noise_y ** 2 + sd_w[l] ** 2) * rng.normal(size=n_oracle)
    elif isinstance(population, tuple) and population[0] == "mixture":
        A, site = _oracle_A(params, n_oracle, rng, population[1])
        Th = params.theta[site]
        y = np.sum(A * Th, axis=1)
        if noisy:
            y = y + np.sqrt(params.noise_y ** 2 + sd_w[site] ** 2) * rng.normal(size=n_oracle)
    elif isinstance(population, tuple) and population[0] == "target_m":
        l = int(population[1])
        A, _ = _oracle_A(params, n_oracle, rng)
        y = _mean_given_A(params, A, l)
        if noisy:
            y = y + sd_w[l] * rng.normal(size=n_oracle)
    elif population == "target":
        A, site = _oracle_A(params, n_oracle, rng)
        y = _target_response(params, A, site, rng, noisy)
    elif population == "mix":
        A, _ = _oracle_A(params, n_oracle, rng)
        eta = oracle_eta(params, A)
        y = np.sum(eta * (A @ params.theta.T), axis=1)
    else:
        raise ValueError(f"unknown population {population!r}")
    return np.linalg.lstsq(A, y, rcond=None)[0]


def _target_response(params, A, site, rng, noisy):
    s = params.s_star
    delta = np.asarray(params.delta_star)
    MA = A @ params.theta.T
    j = 1 if params.q > 1 else 0
    faithful = np.sum(oracle_eta(params, A) * MA, axis=1)
    if params.contamination == "none":
        alt_mean = MA @ delta
    else:
        alt_mean = -params.eps_flip * faithful + _quad(params, A[:, j])
    if not noisy:
        return (1 - s) * faithful + s * alt_mean
    n = A.shape[0]
    sd_w = params.w_noise_sd
    u = rng.random(n)
    own = MA[np.arange(n), site] + sd_w[site] * rng.normal(size=n)
    if params.contamination == "none":
        alt_site = rng.choice(params.L, size=n, p=delta)
        alt = MA[np.arange(n), alt_site] + sd_w[alt_site] * rng.normal(size=n)
    else:
        alt = alt_mean
    return np.where(u < 1 - s, own, alt) + params.noise_y * rng.normal(size=n)


def beta_bar(params, l, n_oracle=1_000_000, seed=0):
    """Population coefficient of m_l on target covariates, by Monte Carlo."""
    return oracle_beta(params, ("target_m", l), n_oracle, seed, noisy=True)


def beta_bar_mix(params, n_oracle=1_000_000, seed=0):
    return oracle_beta(params, "mix", n_oracle, seed)


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True, eq=False)
class EvalReport:
    std_mse_mean: float
    std_mse_worst: float
    per_draw: np.ndarray
    oracle_beta_star: np.ndarray = None
    coef_error: float = None


def draw_deltas(seed, n_draws, L):
    return np.array([uniform_simplex(substream(seed, "eval-delta", b), L) for b in range(n_draws)])


def evaluate(model_coefs, params, sim_target, n_draws=100, seed=0, s_star=None,
             oracle=False, n_oracle=100_000):
    """Standardized MSE of each coefficient vector over ``n_draws`` outcome
    regenerations with uniform delta draws.

    ``model_coefs`` is a vector or a dict name -> vector; returns an
    EvalReport (or a dict of them). MSE_b is divided by the average over
    draws of Var(Y^(b)).
    """
    single = not isinstance(model_coefs, dict)
    coefs = {"model": model_coefs} if single else model_coefs
    s = params.s_star if s_star is None else s_star
    p = params.replace(s_star=s)
    tgt = sim_target.target
    A, W = tgt.A0, tgt.W0
    deltas = draw_deltas(seed, n_draws, params.L)
    names = list(coefs)
    Bmat = np.column_stack([np.asarray(coefs[k], dtype=float) for k in names])
    if Bmat.shape[0] != params.q:
        raise ValueError(f"coefficient length must be q={params.q}")
    P = A @ Bmat
    mse = np.zeros((n_draws, len(names)))
    var = np.zeros(n_draws)
    for b in range(n_draws):
        y = draw_outcomes(p, A, W, sim_target.site, deltas[b], substream(seed, "eval-y", b),
                          contaminated=sim_target.contaminated)
        mse[b] = np.mean((y[:, None] - P) ** 2, axis=0)
        var[b] = np.var(y)
    std = mse / var.mean()
    star = oracle_beta(p, "target", n_oracle, seed) if oracle else None
    out = {}
    for j, k in enumerate(names):
        err = None if star is None else float(np.linalg.norm(Bmat[:, j] - star))
        out[k] = EvalReport(float(std[:, j].mean()), float(std[:, j].max()), std[:, j].copy(),
                            star, err)
    return out["model"] if single else out


# ---------------------------------------------------------------- benchmark

@dataclass
class ReplicationResult:
    rep: int
    rows: list = field(default_factory=list)


def method_coefs(fit, tuning, grid=DEFAULT_GRID):
    model, res = fit.tuned(tuning, grid)
    base = fit.baselines()
    return {"dorm": model.coef, **base}, res.s_hat


def run_replication(params, config, rep, levels=DEFAULT_LEVELS, n_draws=100, grid=DEFAULT_GRID,
                    tuning_outcome="y"):
    """One replication: one fit on shared sources and target covariates,
    then tuning and scoring at every violation level."""
    seed = subseed(params.seed, "rep", rep)
    p = params.replace(seed=seed)
    sources = generate_sources(p)
    st = generate_target(p)
    cfg = dataclasses.replace(config, seed=subseed(seed, "fit"))
    fit = fit_dorm(sources, st.target, cfg)
    rows = []
    for s in levels:
        tun = tuning_sample(p, st, s, tuning_outcome)
        coefs, s_hat = method_coefs(fit, tun, grid)
        reports = evaluate(coefs, p, st, n_draws=n_draws, seed=subseed(seed, "eval"), s_star=s)
        for name in METHODS:
            r = reports[name]
            rows.append({"rep": rep, "violation": float(s), "method": name,
                         "std_mse_mean": r.std_mse_mean, "std_mse_worst": r.std_mse_worst,
                         "s_hat": s_hat if name == "dorm" else np.nan})
    return ReplicationResult(rep, rows)


def _run_rep(args):
    return run_replication(*args)


def benchmark(params, config, n_reps=10, levels=DEFAULT_LEVELS, n_draws=100, threads=1,
              grid=DEFAULT_GRID):
    """Per-replication rows and the method x violation summary table.

    Replications are seeded by index, so results do not depend on
    ``threads``.
    """
    jobs = [(params, config, r, tuple(levels), n_draws, tuple(grid)) for r in range(n_reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_rep, jobs))
    else:
        results = [_run_rep(j) for j in jobs]
    per_rep = pd.DataFrame([row for r in sorted(results, key=lambda r: r.rep) for row in r.rows])
    summary = (per_rep.groupby(["method", "violation"], sort=False)
               .agg(std_mse_mean=("std_mse_mean", "mean"),
                    std_mse_worst=("std_mse_worst", "mean"),
                    n_reps=("rep", "count"))
               .reset_index())
    order = {m: i for i, m in enumerate(METHODS)}
    summary = summary.sort_values(["method", "violation"], key=lambda c: c.map(order) if c.name == "method" else c)
    return summary.reset_index(drop=True), per_rep


def default_config(**kw):
    return FitConfig(**kw)
