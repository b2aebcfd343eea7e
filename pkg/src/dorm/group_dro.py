"""The group-adversarial quadratic program over S(s_max), model assembly and
the averaging/maximin baselines."""

from dataclasses import dataclass, field

import numpy as np

from ._cd import capped_simplex_pg, project_capped_simplex as _project
from ._rng import substream

QP_TOL = 1e-10
QP_MAX_ITER = 20_000
N_RESTARTS = 20
SINGULAR_REL = 1e-10


@dataclass(frozen=True, eq=False)
class GammaMatrix:
    G: np.ndarray

    def __post_init__(self):
        G = np.array(self.G, dtype=float)
        G = 0.5 * (G + G.T)
        G.setflags(write=False)
        object.__setattr__(self, "G", G)

    @property
    def size(self):
        return self.G.shape[0]

    @property
    def min_eig(self):
        return float(np.linalg.eigvalsh(self.G)[0])

    @property
    def near_singular(self):
        tr = np.trace(self.G)
        return self.min_eig < SINGULAR_REL * tr if tr > 0 else True


def compute_gamma_matrix(betas):
    """G_lk = beta_l' Sigma0 beta_k, symmetrized."""
    B = betas.betas
    return GammaMatrix(B @ betas.sigma0 @ B.T)


def project_capped_simplex(v, cap):
    """Euclidean projection onto {g >= 0, sum(g) <= cap}."""
    v = np.ascontiguousarray(v, dtype=float)
    if not 0 <= cap:
        raise ValueError("cap must be nonnegative")
    return _project(v, float(cap))


@dataclass(frozen=True, eq=False)
class AdversarialWeights:
    gamma: np.ndarray
    s_max: float
    objective: float
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float)
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        if np.any(g < 0) or abs(g.sum() - 1) > 1e-10 or g[-1] < 1 - self.s_max - 1e-10:
            raise ValueError("weights outside S(s_max)")


def _reduced(G):
    """Coefficients of the objective in the first L coordinates.

    With gamma = (g, 1 - sum g), gamma'G gamma = g'Hg + 2h'g + c.
    """
    L = G.shape[0] - 1
    E = np.vstack([np.eye(L), -np.ones((1, L))])
    e = np.zeros(L + 1)
    e[L] = 1.0
    H = E.T @ G @ E
    h = E.T @ G @ e
    return 0.5 * (H + H.T), h, float(G[L, L])


def _full(g):
    g = np.maximum(g, 0.0)
    t = g.sum()
    if t > 1.0:  # rounding at s_max = 1
        g, t = g / t, 1.0
    return np.append(g, 1.0 - t)


def solve_weights(G, s_max, restarts=N_RESTARTS, seed=0, tol=QP_TOL, max_iter=QP_MAX_ITER):
    """min gamma'G gamma over S(s_max) by projected gradient.

    Starts from the uniform feasible point; a random restart replaces that
    solution only when strictly better, so ties keep the deterministic start.
    """
    G = G.G if isinstance(G, GammaMatrix) else np.asarray(G, dtype=float)
    if not 0 <= s_max <= 1:
        raise ValueError("s_max must lie in [0, 1]")
    L = G.shape[0] - 1
    if L == 0 or s_max == 0:
        g = np.zeros(L)
        return AdversarialWeights(_full(g), s_max, float(G[L, L]), 0, True)
    H, h, c = _reduced(G)
    lip = 2.0 * np.linalg.norm(H, 2)
    step = 1.0 / lip if lip > 0 else 1.0
    g0 = np.full(L, min(1.0 / (L + 1), s_max / L))
    best_g, best_obj, it, gnorm = capped_simplex_pg(H, h, c, float(s_max), g0, step, tol, max_iter)
    best_it, best_conv = it, gnorm < tol
    rng = substream(seed, "qp-restarts")
    for _ in range(restarts):
        # uniform draw on the capped simplex: a Dirichlet over L+1 coordinates
        # gives sum(g) <= 1, then scale the mass to s_max
        start = rng.dirichlet(np.ones(L + 1))[:L] * s_max
        g, obj, it, gnorm = capped_simplex_pg(H, h, c, float(s_max), start, step, tol, max_iter)
        if obj < best_obj - 1e-12 * max(1.0, abs(best_obj)):
            best_g, best_obj, best_it, best_conv = g, obj, it, gnorm < tol
    gamma = _full(best_g)
    return AdversarialWeights(gamma, s_max, float(gamma @ G @ gamma), int(best_it), bool(best_conv))


def objective(G, gamma):
    G = G.G if isinstance(G, GammaMatrix) else np.asarray(G)
    return float(gamma @ G @ gamma)


# ---------------------------------------------------------------- assembly

@dataclass(frozen=True, eq=False)
class DormModel:
    """Final coefficient vector with the per-fold weights it was built from.

    Under cross-fitting ``betasets`` and ``weights`` hold one entry per fold
    and ``coef`` is the fold average of sum_l gamma_l beta_l.
    """

    coef: np.ndarray
    s_max: float
    betasets: tuple
    weights: tuple
    gamma_matrices: tuple
    rho: tuple = ()
    condition_flags: tuple = ()
    tuning: object = None
    extra: dict = field(default_factory=dict)

    @property
    def gamma(self):
        return np.mean([w.gamma for w in self.weights], axis=0)

    def predict(self, A):
        return np.asarray(A, dtype=float) @ self.coef

    def to_dict(self):
        out = {
            "coef": self.coef,
            "gamma": [w.gamma for w in self.weights],
            "gamma_objective": [w.objective for w in self.weights],
            "rho": [np.asarray(r) for r in self.rho],
            "s_max": self.s_max,
            "gamma_matrix": [gm.G for gm in self.gamma_matrices],
            "condition_flags": list(self.condition_flags),
            "betas": [b.betas for b in self.betasets],
            "sigma0": self.betasets[0].sigma0,
            "fold": [b.fold_tag for b in self.betasets],
        }
        if self.tuning is not None:
            out["tuning"] = self.tuning.to_dict()
        out.update(self.extra)
        return out


def condition_flags(gamma_matrices, weights):
    flags = []
    if any(gm.near_singular for gm in gamma_matrices):
        flags.append("near_singular_gamma")
    if any(not w.converged for w in weights):
        flags.append("qp_not_converged")
    return flags


def assemble(betasets, weights, gamma_matrices=None, rho=(), extra_flags=()):
    """coef = mean over folds of sum_l gamma_l beta_l."""
    if not isinstance(betasets, (list, tuple)):
        betasets, weights = (betasets,), (weights,)
    betasets, weights = tuple(betasets), tuple(weights)
    if len(betasets) != len(weights):
        raise ValueError("fold mismatch: one weight vector per BetaSet required")
    s_vals = {w.s_max for w in weights}
    if len(s_vals) != 1:
        raise ValueError("fold mismatch: weights solved at different s_max")
    for b, w in zip(betasets, weights):
        if b.betas.shape[0] != w.gamma.shape[0]:
            raise ValueError("fold mismatch: weight length differs from BetaSet rows")
    if gamma_matrices is None:
        gamma_matrices = tuple(compute_gamma_matrix(b) for b in betasets)
    parts = [w.gamma @ b.betas for b, w in zip(betasets, weights)]
    coef = parts[0] if len(parts) == 1 else np.mean(parts, axis=0)
    flags = tuple(dict.fromkeys(list(extra_flags) + condition_flags(gamma_matrices, weights)))
    return DormModel(np.asarray(coef), weights[0].s_max, betasets, weights,
                     tuple(gamma_matrices), tuple(rho), flags)


def fit_smax(betasets, s_max, gamma_matrices=None, rho=(), extra_flags=(), seed=0):
    """Solve the weights on every fold at one s_max and assemble."""
    if not isinstance(betasets, (list, tuple)):
        betasets = (betasets,)
    if gamma_matrices is None:
        gamma_matrices = [compute_gamma_matrix(b) for b in betasets]
    weights = [solve_weights(gm, s_max, seed=seed) for gm in gamma_matrices]
    return assemble(betasets, weights, gamma_matrices, rho, extra_flags)


def baselines(betasets, rho, gamma_matrices=None, seed=0):
    """SimpleAve, RhoAve and Maximin (s_max = 1), fold-averaged if needed."""
    if not isinstance(betasets, (list, tuple)):
        betasets = (betasets,)
        rho = (rho,)
    rhos = [np.asarray(getattr(r, "rho", r), dtype=float) for r in rho]
    simple = np.mean([b.betas[:-1].mean(axis=0) for b in betasets], axis=0)
    rho_ave = np.mean([r @ b.betas[:-1] for b, r in zip(betasets, rhos)], axis=0)
    maximin = fit_smax(betasets, 1.0, gamma_matrices, seed=seed).coef
    return {"simple_ave": simple, "rho_ave": rho_ave, "maximin": maximin}
