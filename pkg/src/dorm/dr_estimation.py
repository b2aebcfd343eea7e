"""Plug-in and doubly-robust coefficient estimators, cross-fitting, and the
penalized-moment variant."""

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ._cd import cd_quadratic_l1
from ._rng import substream, subseed
from .data_model import SourceDataset
from .density_ratio import SmallTargetError, build_reference, fit_source_ratios, fit_w, ratio_matrix
from .mixture_weights import estimate_rho, posterior_eta
from .regressors import CD_MAX_SWEEPS, CD_TOL, fit_linear, kfold_indices, lambda_grid

SIGMA_JITTER = 1e-8


class SingularSigmaError(ArithmeticError):
    """Target second-moment matrix is singular even after jitter."""


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BetaSet:
    """Rows 0..L-1 hold the per-source coefficients, row L holds beta_mix.

    ``plugin`` keeps the plug-in rows, ``corrections`` the per-source DR
    corrections of rows 0..L-1 and ``mix_pieces`` the per-source
    contributions to the correction of beta_mix.
    """

    betas: np.ndarray
    sigma0: np.ndarray
    fold_tag: str = "full"
    plugin: np.ndarray = None
    corrections: np.ndarray = None
    mix_pieces: np.ndarray = None

    def __post_init__(self):
        for name in ("betas", "sigma0", "plugin", "corrections", "mix_pieces"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _freeze(v))
        if not (np.all(np.isfinite(self.betas)) and np.all(np.isfinite(self.sigma0))):
            raise SingularSigmaError("non-finite coefficient estimates")

    @property
    def L(self):
        return self.betas.shape[0] - 1

    @property
    def q(self):
        return self.betas.shape[1]

    @property
    def beta_mix(self):
        return self.betas[-1]

    def to_dict(self):
        return {"betas": self.betas, "sigma0": self.sigma0, "fold_tag": self.fold_tag}


def target_sigma(A0):
    A0 = np.asarray(A0, dtype=float)
    S = A0.T @ A0 / A0.shape[0]
    return 0.5 * (S + S.T)


def _sigma_solver(S):
    q = S.shape[0]
    jitter = SIGMA_JITTER * np.trace(S) / q
    # singular: the solve would be driven by the jitter alone
    if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(S)[0] <= jitter:
        raise SingularSigmaError("target second-moment matrix is singular")
    try:
        cf = linalg.cho_factor(S + jitter * np.eye(q))
    except linalg.LinAlgError as exc:
        raise SingularSigmaError("target second-moment matrix is singular") from exc
    return lambda B: linalg.cho_solve(cf, B)


# ---------------------------------------------------------------- nuisances

@dataclass(eq=False)
class NuisanceBundle:
    """Fitted m_l, r_l, w_l, rho and eta; ``flags`` records fallbacks."""

    m_models: list
    ratio_models: list
    rho: object
    w_models: list
    reference: object = None
    flags: list = field(default_factory=list)

    @property
    def L(self):
        return len(self.m_models)

    def m_matrix(self, X):
        return np.column_stack([m.predict(X) for m in self.m_models])

    def r_matrix(self, X):
        return ratio_matrix(self.ratio_models, X)

    def eta(self, X, R=None):
        return posterior_eta(self.rho, self.r_matrix(X) if R is None else R)

    def w(self, l, X, R=None):
        return self.w_models[l].evaluate(X, R)


def _learner_args(config):
    penalty = {"ols": "none"}.get(config.nuisance_learner, config.nuisance_learner)
    grid = None if config.nuisance_lambda_grid is None else list(config.nuisance_lambda_grid)
    return penalty, grid


def rho_lambda(config, n0):
    return config.ridge_lambda_rho if config.ridge_lambda_rho is not None else n0 ** -0.5


def fit_nuisances(sources, target, config, seed=None):
    """Fit m_l on labeled rows, r_l against the reference, rho on the target
    ratios, and w_l under the configured option."""
    seed = config.seed if seed is None else seed
    penalty, grid = _learner_args(config)
    m_models = [fit_linear(ds.X_labeled, ds.y, penalty=penalty, lambda_grid=grid,
                           folds=min(config.folds, ds.n_labeled), seed=subseed(seed, "m", l))
                for l, ds in enumerate(sources)]
    reference = build_reference(sources, config.reference_strategy, config.reference_fraction,
                                subseed(seed, "reference"))
    ratios = fit_source_ratios(sources, reference, config, subseed(seed, "ratios"))
    R0 = ratio_matrix(ratios, target.X)
    rho = estimate_rho(R0, rho_lambda(config, target.n), sign=config.rho_penalty_sign)
    flags = []
    if not rho.converged:
        flags.append("rho_not_converged")
    try:
        w_models = fit_w(target, sources, ratios, rho, reference, config, subseed(seed, "w"))
    except SmallTargetError as exc:
        warnings.warn(f"{exc}; falling back to mixture_ratio", RuntimeWarning, stacklevel=2)
        flags.append("w_fallback_mixture_ratio")
        fallback = dataclasses.replace(config, w_option="mixture_ratio")
        w_models = fit_w(target, sources, ratios, rho, reference, fallback, subseed(seed, "w"))
    return NuisanceBundle(m_models, ratios, rho, w_models, reference, flags)


# ---------------------------------------------------------------- moments

@dataclass(frozen=True, eq=False)
class Moments:
    """Cross-moment vectors whose Sigma-solves give the coefficient rows."""

    sigma0: np.ndarray
    plug: np.ndarray        # (L+1) x q, target means of m A
    corr: np.ndarray        # L x q, labeled-source means of w (y - m) A
    mix: np.ndarray         # L x q, same with eta inside


def _target_means(target, nuis, A0=None, X0=None):
    A0 = target.A0 if A0 is None else A0
    X0 = target.X if X0 is None else X0
    M = nuis.m_matrix(X0)
    eta = nuis.eta(X0)
    M = np.column_stack([M, np.sum(eta * M, axis=1)])
    return M.T @ A0 / A0.shape[0]


def compute_moments(target, sources, nuis, correct=True):
    L = len(sources)
    q = target.A0.shape[1]
    plug = _target_means(target, nuis)
    corr = np.zeros((L, q))
    mix = np.zeros((L, q))
    if correct:
        for l, ds in enumerate(sources):
            X = ds.X_labeled
            A = ds.A[:ds.n_labeled]
            R = nuis.r_matrix(X)
            resid = ds.y - nuis.m_models[l].predict(X)
            wr = nuis.w(l, X, R) * resid
            eta_l = nuis.eta(X, R)[:, l]
            corr[l] = A.T @ wr / ds.n_labeled
            mix[l] = A.T @ (eta_l * wr) / ds.n_labeled
    return Moments(target_sigma(target.A0), plug, corr, mix)


def _betas_from_moments(mom, fold_tag, correct=True):
    solve = _sigma_solver(mom.sigma0)
    plugin = solve(mom.plug.T).T
    L = mom.corr.shape[0]
    corrections = solve(mom.corr.T).T
    mix_pieces = solve(mom.mix.T).T
    betas = plugin.copy()
    if correct:
        betas[:L] += corrections
        betas[L] += mix_pieces.sum(axis=0)
    return BetaSet(betas, mom.sigma0, fold_tag, plugin, corrections, mix_pieces)


def plugin_betas(target, nuisances):
    """Plug-in rows: Sigma^-1 mean_0(m_l A) and the eta-weighted mix."""
    mom = Moments(target_sigma(target.A0), _target_means(target, nuisances),
                  np.zeros((nuisances.L, target.A0.shape[1])),
                  np.zeros((nuisances.L, target.A0.shape[1])))
    return _betas_from_moments(mom, "full", correct=False)


def dr_betas(target, sources, nuisances, fold_tag="full"):
    """Plug-in rows plus the importance-weighted residual corrections."""
    for ds in sources:
        if ds.n_labeled < 1:
            raise ValueError(f"site {ds.site_id}: no labeled rows")
    return _betas_from_moments(compute_moments(target, sources, nuisances), fold_tag)


# ---------------------------------------------------------------- cross-fitting

def make_partition(sources, seed):
    """Per source, ``(labeled_A, unlabeled_A, labeled_B, unlabeled_B)``.

    Labeled and unlabeled rows are halved separately; unlabeled indices are
    absolute row numbers.
    """
    parts = []
    for l, ds in enumerate(sources):
        rng = substream(seed, "crossfit", l)
        lab = rng.permutation(ds.n_labeled)
        unl = ds.n_labeled + rng.permutation(ds.n_total - ds.n_labeled)
        hl, hu = ds.n_labeled // 2, (ds.n_total - ds.n_labeled) // 2
        parts.append((np.sort(lab[:hl]), np.sort(unl[:hu]),
                      np.sort(lab[hl:]), np.sort(unl[hu:])))
    return parts


@dataclass(frozen=True, eq=False)
class CrossFitResult:
    averaged: BetaSet
    folds: tuple
    nuisances: tuple
    partition: list = None


def _fold_sources(sources, partition, which):
    off = 0 if which == "A" else 2
    return [SourceDataset(ds.site_id, *_rows(ds, p[off], p[off + 1]))
            for ds, p in zip(sources, partition)]


def _rows(ds, lab, unl):
    rows = np.concatenate([np.asarray(lab, dtype=int), np.asarray(unl, dtype=int)])
    return ds.A[rows], ds.W[rows], ds.y[np.asarray(lab, dtype=int)]


def cross_fit(sources, target, config, partition=None, beta_fn=None):
    """Two-fold cross-fitting.

    Fold-A coefficients use fold-A moments with nuisances fitted on fold B,
    and vice versa; the whole target sample enters both. Both folds use the
    same nuisance seed, so identical folds give identical coefficients.
    """
    for ds in sources:
        if ds.n_labeled < 4:
            raise ValueError(f"site {ds.site_id}: cross-fitting needs at least 4 labeled rows")
    if partition is None:
        partition = make_partition(sources, subseed(config.seed, "partition"))
    fold_a = _fold_sources(sources, partition, "A")
    fold_b = _fold_sources(sources, partition, "B")
    nseed = subseed(config.seed, "nuisance")
    nuis_b = fit_nuisances(fold_b, target, config, nseed)
    nuis_a = fit_nuisances(fold_a, target, config, nseed)
    beta_fn = beta_fn or dr_betas
    beta_a = beta_fn(target, fold_a, nuis_b, fold_tag="A")
    beta_b = beta_fn(target, fold_b, nuis_a, fold_tag="B")
    avg = BetaSet(0.5 * (beta_a.betas + beta_b.betas), beta_a.sigma0, "averaged")
    return CrossFitResult(avg, (beta_a, beta_b), (nuis_b, nuis_a), partition)


# ---------------------------------------------------------------- regularized

def _solve_penalized(S, g, lam, penalty, pen):
    if lam == 0:
        return _sigma_solver(S)(g)
    if penalty == "ridge":
        return linalg.solve(S + lam * np.diag(pen ** 2), g, assume_a="pos")
    b = np.zeros(g.shape[0])
    Sj = S + SIGMA_JITTER * np.trace(S) / S.shape[0] * np.eye(S.shape[0])
    cd_quadratic_l1(np.ascontiguousarray(Sj), g.astype(float), float(lam), pen, b,
                    CD_TOL, CD_MAX_SWEEPS)
    return b


def _penalty_weights(A0):
    sd = A0.std(axis=0)
    pen = np.where(sd > 0, sd, 0.0)
    pen[0] = 0.0
    return pen


def regularized_betas(target, sources, nuisances, penalty="lasso", lambdas=None,
                      tuning=None, folds=5, seed=0, fold_tag="full", n_lambdas=30):
    """Rows solve min 0.5 b'Sb - b'g_l + lam * pen(b) with g_l the DR moment.

    The intercept is unpenalized and other coordinates are weighted by their
    target standard deviation. ``lam`` is chosen per row by tuning-sample MSE
    when labels are available, else by the one-standard-error rule on K-fold
    target splits of the quadratic objective.
    """
    if penalty not in ("ridge", "lasso"):
        raise ValueError("penalty must be 'ridge' or 'lasso'")
    mom = compute_moments(target, sources, nuisances)
    L, q = mom.corr.shape
    G = mom.plug.copy()
    G[:L] += mom.corr
    G[L] += mom.mix.sum(axis=0)
    pen = _penalty_weights(target.A0)
    S = mom.sigma0
    if lambdas is not None:
        grid = np.sort(np.atleast_1d(np.asarray(lambdas, dtype=float)))[::-1]
    else:
        nz = pen > 0
        if penalty == "lasso":
            lmax = np.max(np.abs(G[:, nz]) / pen[nz]) if nz.any() else 1.0
        else:
            lmax = max(np.max(np.abs(G[:, nz])), 1e-12) if nz.any() else 1.0
        grid = lambda_grid(lmax, n_lambdas)
    betas = np.zeros((L + 1, q))
    chosen = np.zeros(L + 1)
    for row in range(L + 1):
        path = np.array([_solve_penalized(S, G[row], lam, penalty, pen) for lam in grid])
        if len(grid) == 1:
            best = 0
        elif tuning is not None and tuning.y is not None:
            mse = np.mean((tuning.y[None, :] - path @ tuning.A.T) ** 2, axis=1)
            best = int(np.argmin(mse))
        else:
            best = _one_se_choice(target, nuisances, mom, row, grid, penalty, pen, folds, seed)
        betas[row] = path[best]
        chosen[row] = grid[best]
    out = BetaSet(betas, S, fold_tag)
    object.__setattr__(out, "lambdas", chosen)
    return out


def _one_se_choice(target, nuis, mom, row, grid, penalty, pen, folds, seed):
    L = mom.corr.shape[0]
    shift = mom.corr[row] if row < L else mom.mix.sum(axis=0)
    A0, X0 = target.A0, target.X
    n = A0.shape[0]
    k = max(2, min(folds, n))
    losses = np.zeros((k, len(grid)))
    for i, te in enumerate(kfold_indices(n, k, substream(seed, "reg-cv", row))):
        tr = np.setdiff1d(np.arange(n), te)
        S_tr, S_te = target_sigma(A0[tr]), target_sigma(A0[te])
        g_tr = _target_means(target, nuis, A0[tr], X0[tr])[row] + shift
        g_te = _target_means(target, nuis, A0[te], X0[te])[row] + shift
        for j, lam in enumerate(grid):
            b = _solve_penalized(S_tr, g_tr, lam, penalty, pen)
            losses[i, j] = 0.5 * b @ S_te @ b - b @ g_te
    mean = losses.mean(axis=0)
    se = losses.std(axis=0, ddof=1) / np.sqrt(k)
    best = int(np.argmin(mean))
    # grid is decreasing: the first index within one SE is the most penalized
    return int(np.flatnonzero(mean <= mean[best] + se[best])[0])
