"""Penalized least squares and penalized logistic regression used as
nuisance learners, with K-fold selection of the penalty strength.

Both estimators follow the scikit-learn estimator protocol. The linear
model has no separate intercept: a constant column of ``X`` plays that
role and is never penalized. The logistic model carries its own intercept
(``coef_[0]``) and ignores constant columns.
"""

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import blas
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from dorm._cd import cd_quadratic_l1
from dorm._rng import substream

CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
N_LAMBDAS = 50
LAMBDA_SPAN = (1e-4, 1e2)
PROB_EPS = 1e-12
NEWTON_MAX_DIM = 50  # wider penalized fits use L-BFGS; a Newton Gram costs n k^2
# lasso paths stop early once this fraction of variance is explained
PATH_R2_STOP = 0.999


class DegenerateClassificationError(ValueError):
    """Raised when a classifier is asked to fit a single class."""


def lambda_grid(lambda_max, n=N_LAMBDAS, span=LAMBDA_SPAN):
    """Decreasing log-spaced grid spanning ``span`` times ``lambda_max``."""
    lambda_max = float(lambda_max) if lambda_max > 0 else 1.0
    lo, hi = span
    return lambda_max * np.logspace(np.log10(hi), np.log10(lo), n)


def lasso_path(G, c, lambdas, pen=None, yy=None):
    """Warm-started path of ``min 0.5 b'Gb - c'b + lam * sum(pen |b|)``.

    When ``yy`` (the mean squared centered response) is given, the path stops
    once the explained fraction reaches ``PATH_R2_STOP`` and the remaining
    entries repeat the last solution.
    """
    d = len(c)
    pen = np.ones(d) if pen is None else np.asarray(pen, dtype=float)
    b = np.zeros(d)
    out = np.zeros((len(lambdas), d))
    for i, lam in enumerate(lambdas):
        cd_quadratic_l1(G, c, float(lam), pen, b, CD_TOL, CD_MAX_SWEEPS)
        out[i] = b
        if yy is not None and yy > 0:
            r2 = (2 * c @ b - b @ G @ b) / yy
            if r2 >= PATH_R2_STOP:
                out[i + 1:] = b
                break
    return out


def kfold_indices(n, folds, rng):
    perm = rng.permutation(n)
    return np.array_split(perm, folds)


def _constant_columns(X):
    return np.ptp(X, axis=0) == 0


class _Standardizer:
    """Center (when an intercept column exists) and scale varying columns."""

    def __init__(self, X, scale=True, center=None):
        const = _constant_columns(X)
        nonzero_const = const & (X[0] != 0)
        self.varying = ~const
        self.intercept_col = int(np.flatnonzero(nonzero_const)[0]) if nonzero_const.any() else None
        if center is None:
            center = self.intercept_col is not None
        Xv = X[:, self.varying]
        self.center = center
        self.mean = Xv.mean(axis=0) if center else np.zeros(Xv.shape[1])
        if scale:
            sd = np.sqrt(((Xv - self.mean) ** 2).mean(axis=0))
            sd[sd == 0] = 1.0
        else:
            sd = np.ones(Xv.shape[1])
        self.scale = sd

    def transform(self, X):
        return (X[:, self.varying] - self.mean) / self.scale


class PenalizedLinearRegression(RegressorMixin, BaseEstimator):
    """Least squares with an optional ridge or lasso penalty.

    Parameters
    ----------
    penalty : {'none', 'ridge', 'lasso'}
    lambdas : float, sequence of float or None
        Penalty strength(s). A sequence is searched by K-fold
        cross-validation; ``None`` builds the default grid from the data.
    folds : int
    standardize : bool
        Scale varying columns to unit variance before penalizing.
    random_state : int or None
        Seed for the fold assignment.

    The objective is ``(1/2n)||y - Xb||^2 + lambda * pen(b)`` with
    ``pen = ||b||_2^2 / 2`` for ridge and ``||b||_1`` for lasso, evaluated on
    the standardized columns.
    """

    def __init__(self, penalty="none", lambdas=None, folds=5, standardize=True,
                 n_lambdas=N_LAMBDAS, random_state=None):
        self.penalty = penalty
        self.lambdas = lambdas
        self.folds = folds
        self.standardize = standardize
        self.n_lambdas = n_lambdas
        self.random_state = random_state

    def _path(self, X, y, lambdas):
        """Coefficient path on the raw scale, shape (len(lambdas), d)."""
        n, d = X.shape
        st = _Standardizer(X, scale=self.standardize)
        Z = st.transform(X)
        y_mean = y.mean() if st.center else 0.0
        yc = y - y_mean
        if self.penalty == "ridge":
            U, s, Vt = linalg.svd(Z, full_matrices=False)
            Uty = U.T @ yc
            path = np.stack([Vt.T @ (s / (s**2 + n * lam) * Uty) for lam in lambdas])
        else:
            path = lasso_path(Z.T @ Z / n, Z.T @ yc / n, lambdas, yy=yc @ yc / n)
        coefs = np.zeros((len(lambdas), d))
        raw = path / st.scale
        coefs[:, st.varying] = raw
        if st.intercept_col is not None:
            coefs[:, st.intercept_col] = (y_mean - raw @ st.mean) / X[0, st.intercept_col]
        return coefs

    def _lambda_max(self, X, y):
        st = _Standardizer(X, scale=self.standardize)
        Z = st.transform(X)
        yc = y - (y.mean() if st.center else 0.0)
        if Z.shape[1] == 0:
            return 1.0
        return float(np.max(np.abs(Z.T @ yc)) / len(y))

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        n = X.shape[0]
        if n < 2:
            raise ValueError("need at least 2 rows")
        if self.penalty == "none":
            self.coef_ = np.linalg.lstsq(X, y, rcond=None)[0]
            self.lambda_ = 0.0
            self.cv_scores_ = None
            return self
        if self.penalty not in ("ridge", "lasso"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.lambdas is None:
            grid = lambda_grid(self._lambda_max(X, y), self.n_lambdas)
        else:
            grid = np.sort(np.atleast_1d(np.asarray(self.lambdas, dtype=float)))[::-1]
        if np.any(grid < 0) or len(grid) == 0:
            raise ValueError("lambda grid must be nonempty and nonnegative")
        if len(grid) == 1:
            self.cv_scores_ = None
            best = 0
        else:
            rng = substream(self.random_state, "linear-cv")
            scores = np.zeros(len(grid))
            for test in kfold_indices(n, min(self.folds, n), rng):
                train = np.setdiff1d(np.arange(n), test)
                path = self._path(X[train], y[train], grid)
                resid = y[test][None, :] - path @ X[test].T
                scores += (resid**2).sum(axis=1)
            self.cv_scores_ = scores / n
            best = int(np.argmin(self.cv_scores_))
        self.lambda_ = float(grid[best])
        self.lambda_grid_ = grid
        self.coef_ = self._path(X, y, [self.lambda_])[0]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_


def _weighted_gram(Z, w):
    """Z' diag(w) Z via a symmetric rank-k update."""
    if Z.shape[1] == 0:
        return np.zeros((0, 0))
    Zw = np.asfortranarray(Z * np.sqrt(w)[:, None])
    U = blas.dsyrk(1.0, Zw, trans=1)
    return np.triu(U) + np.triu(U, 1).T


class PenalizedLogisticRegression(ClassifierMixin, BaseEstimator):
    """Ridge-penalized logistic regression fitted by damped Newton steps, or
    by L-BFGS when the design is wide and the penalty is positive.

    ``coef_`` has length ``d + 1`` with the intercept first; the intercept is
    not penalized. Penalty strength is chosen by K-fold held-out log loss when
    ``lambdas`` holds more than one value.
    """

    def __init__(self, lambdas=None, folds=5, standardize=True,
                 n_lambdas=N_LAMBDAS, random_state=None, max_iter=100, tol=1e-10,
                 span=LAMBDA_SPAN):
        self.lambdas = lambdas
        self.span = span
        self.folds = folds
        self.standardize = standardize
        self.n_lambdas = n_lambdas
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    @staticmethod
    def _objective(Z, g, b0, b, lam):
        eta = b0 + Z @ b
        return np.mean(np.logaddexp(0.0, eta) - g * eta) + 0.5 * lam * (b @ b)

    def _newton(self, Z, g, lam, b0, b):
        n, k = Z.shape
        f = self._objective(Z, g, b0, b, lam)
        for _ in range(self.max_iter):
            p = expit(b0 + Z @ b)
            r = p - g
            grad = np.concatenate(([r.mean()], Z.T @ r / n + lam * b))
            w = p * (1 - p)
            H = np.empty((k + 1, k + 1))
            H[0, 0] = w.mean()
            zw = Z.T @ w / n
            H[0, 1:] = zw
            H[1:, 0] = zw
            H[1:, 1:] = _weighted_gram(Z, w) / n + lam * np.eye(k)
            try:
                step = linalg.cho_solve(linalg.cho_factor(H), grad)
            except linalg.LinAlgError:
                step = np.linalg.lstsq(H, grad, rcond=None)[0]
            t = 1.0
            while True:
                nb0, nb = b0 - t * step[0], b - t * step[1:]
                f_new = self._objective(Z, g, nb0, nb, lam)
                if f_new <= f + 1e-14 * max(1.0, abs(f)) or t < 1e-10:
                    break
                t *= 0.5
            change = t * np.max(np.abs(step))
            b0, b, f = nb0, nb, f_new
            if change < self.tol:
                break
        return b0, b

    def _lbfgs(self, Z, g, lam, b0, b):
        n = Z.shape[0]

        def fg(x):
            eta = x[0] + Z @ x[1:]
            r = expit(eta) - g
            f = np.mean(np.logaddexp(0.0, eta) - g * eta) + 0.5 * lam * (x[1:] @ x[1:])
            return f, np.concatenate(([r.mean()], Z.T @ r / n + lam * x[1:]))

        res = optimize.minimize(fg, np.r_[b0, b], jac=True, method="L-BFGS-B",
                                options={"maxiter": 50 * self.max_iter, "gtol": self.tol,
                                         "ftol": 1e-15, "maxcor": 20})
        return res.x[0], res.x[1:]

    def _solve(self, Z, g, lam, b0, b):
        if lam > 0 and Z.shape[1] > NEWTON_MAX_DIM:
            return self._lbfgs(Z, g, lam, b0, b)
        return self._newton(Z, g, lam, b0, b)

    def _path(self, X, g, lambdas):
        st = _Standardizer(X, scale=self.standardize, center=True)
        Z = st.transform(X)
        d = X.shape[1]
        gbar = np.clip(g.mean(), PROB_EPS, 1 - PROB_EPS)
        b0, b = np.log(gbar / (1 - gbar)), np.zeros(Z.shape[1])
        out = np.zeros((len(lambdas), d + 1))
        for i, lam in enumerate(lambdas):
            b0, b = self._solve(Z, g, lam, b0, b)
            raw = b / st.scale
            out[i, 0] = b0 - raw @ st.mean
            out[i, 1:][st.varying] = raw
        return out

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        classes = np.unique(y)
        if len(classes) != 2:
            raise DegenerateClassificationError(
                "degenerate classification: need exactly two classes")
        self.classes_ = classes
        g = (y == classes[1]).astype(float)
        n = len(g)
        if self.lambdas is None:
            st = _Standardizer(X, scale=self.standardize, center=True)
            Z = st.transform(X)
            lmax = float(np.max(np.abs(Z.T @ (g - g.mean()))) / n) if Z.shape[1] else 1.0
            grid = lambda_grid(lmax, self.n_lambdas, self.span)
        else:
            grid = np.sort(np.atleast_1d(np.asarray(self.lambdas, dtype=float)))[::-1]
        if len(grid) == 0 or np.any(grid < 0):
            raise ValueError("lambda grid must be nonempty and nonnegative")
        if len(grid) == 1:
            best = 0
            self.cv_scores_ = None
        else:
            scores = self._cv(X, g, grid)
            floor = grid[0] * LAMBDA_SPAN[0] / self.span[1] if self.lambdas is None else np.inf
            # a default grid whose best value sits on its lower edge is
            # extended one decade at a time, down to the standard floor
            while int(np.argmin(scores)) == len(grid) - 1 and grid[-1] > floor * (1 + 1e-9):
                step = grid[-1] / grid[-2] if len(grid) > 1 else 0.1
                k = max(1, int(round(np.log(0.1) / np.log(step))))
                ext = grid[-1] * step ** np.arange(1, k + 1)
                ext = ext[ext >= floor * (1 - 1e-9)]
                if ext.size == 0:
                    break
                grid = np.r_[grid, ext]
                scores = np.r_[scores, self._cv(X, g, ext)]
            self.cv_scores_ = scores
            best = int(np.argmin(scores))
        self.lambda_ = float(grid[best])
        self.lambda_grid_ = grid
        self.coef_ = self._path(X, g, [self.lambda_])[0]
        return self

    def _cv(self, X, g, grid):
        """Mean held-out log loss per penalty value."""
        n = len(g)
        rng = substream(self.random_state, "logistic-cv")
        scores = np.zeros(len(grid))
        for test in kfold_indices(n, min(self.folds, n), rng):
            train = np.setdiff1d(np.arange(n), test)
            if len(np.unique(g[train])) < 2:
                raise DegenerateClassificationError(
                    "degenerate classification: a training fold holds one class")
            path = self._path(X[train], g[train], grid)
            eta = path[:, :1] + path[:, 1:] @ X[test].T
            scores += (np.logaddexp(0.0, eta) - g[test] * eta).sum(axis=1)
        return scores / n

    def objective(self, X, y, coef=None, lam=None):
        """Penalized negative log-likelihood on the standardized scale."""
        check_is_fitted(self, "coef_")
        X = check_array(X)
        coef = self.coef_ if coef is None else np.asarray(coef, dtype=float)
        lam = self.lambda_ if lam is None else lam
        g = (np.asarray(y) == self.classes_[1]).astype(float)
        st = _Standardizer(X, scale=self.standardize, center=True)
        b = coef[1:][st.varying] * st.scale
        eta = coef[0] + X @ coef[1:]
        return np.mean(np.logaddexp(0.0, eta) - g * eta) + 0.5 * lam * (b @ b)

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return self.coef_[0] + X @ self.coef_[1:]

    def predict_proba(self, X):
        p = np.clip(expit(self.decision_function(X)), PROB_EPS, 1 - PROB_EPS)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


def fit_linear(X, y, penalty="none", lambda_grid=None, folds=5, seed=None, **kwargs):
    """Fit a :class:`PenalizedLinearRegression` and return it."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    return PenalizedLinearRegression(penalty=penalty, lambdas=lambda_grid, folds=folds,
                                     random_state=seed, **kwargs).fit(X, y)


def fit_logistic(X, g, lambda_grid=None, folds=5, seed=None, **kwargs):
    """Fit a :class:`PenalizedLogisticRegression` on a 0/1 label vector."""
    X = np.asarray(X, dtype=float)
    g = np.asarray(g)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    if len(np.unique(g)) < 2:
        raise DegenerateClassificationError("degenerate classification: single class")
    return PenalizedLogisticRegression(lambdas=lambda_grid, folds=folds,
                                       random_state=seed, **kwargs).fit(X, g)
