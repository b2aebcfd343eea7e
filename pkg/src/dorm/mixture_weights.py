"""Prior mixture weights on the simplex and the induced posterior weights."""

from dataclasses import dataclass, field

import numpy as np

RHO_TOL = 1e-9
RHO_MAX_ITER = 5000
ARMIJO_SIGMA = 1e-4


def project_simplex(v):
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    cond = u - css / k > 0
    r = k[cond][-1]
    theta = css[cond][-1] / r
    return np.maximum(v - theta, 0.0)


@dataclass(frozen=True, eq=False)
class RhoEstimate:
    rho: np.ndarray
    objective: float
    iterations: int
    converged: bool = True
    trace: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-10:
            raise ValueError("rho must lie on the simplex")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @property
    def L(self):
        return self.rho.size


def rho_objective(R, rho, lam, sign="minus"):
    s = -1.0 if sign == "minus" else 1.0
    return float(np.mean(np.log(R @ rho)) + s * lam * (rho @ rho))


def estimate_rho(R, lam, seed=None, sign="minus", tol=RHO_TOL, max_iter=RHO_MAX_ITER):
    """Maximize mean(log(R rho)) -/+ lam * ||rho||^2 over the simplex.

    Projected gradient ascent with Armijo backtracking from the uniform point.
    ``seed`` is accepted for interface symmetry; the solver is deterministic.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] == 0:
        raise ValueError("R must be a nonempty N_0 x L matrix")
    if not np.all(np.isfinite(R)) or np.any(R <= 0):
        raise ValueError("ratio matrix entries must be positive and finite")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if sign not in ("minus", "plus"):
        raise ValueError("sign must be 'minus' or 'plus'")
    n, L = R.shape
    s = -1.0 if sign == "minus" else 1.0

    def f(r):
        return float(np.mean(np.log(R @ r)) + s * lam * (r @ r))

    def grad(r):
        return R.T @ (1.0 / (R @ r)) / n + 2.0 * s * lam * r

    rho = np.full(L, 1.0 / L)
    fval = f(rho)
    trace = [fval]
    t = 1.0
    converged = False
    it = 0
    while it < max_iter:
        g = grad(rho)
        if np.linalg.norm(project_simplex(rho + g) - rho) < tol:
            converged = True
            break
        t = min(2.0 * t, 1e6)
        while True:
            cand = project_simplex(rho + t * g)
            fc = f(cand)
            if fc >= fval + ARMIJO_SIGMA * (g @ (cand - rho)) or t < 1e-14:
                break
            t *= 0.5
        it += 1
        if fc < fval:
            # no ascent possible at machine precision
            converged = True
            break
        step_norm = np.linalg.norm(cand - rho)
        rho, fval = cand, fc
        trace.append(fval)
        if step_norm == 0.0:
            converged = True
            break
    rho = np.maximum(rho, 0.0)
    rho = rho / rho.sum()
    return RhoEstimate(rho=rho, objective=f(rho), iterations=it, converged=converged,
                       trace=np.array(trace))


def posterior_eta(rho, r_values):
    """Posterior weights rho_l r_l / sum_k rho_k r_k.

    ``r_values`` is a length-L vector or an n x L matrix (one row per point).
    """
    rho = rho.rho if isinstance(rho, RhoEstimate) else np.asarray(rho, dtype=float)
    r = np.asarray(r_values, dtype=float)
    if np.any(r <= 0):
        raise ValueError("ratio values must be positive")
    num = r * rho
    return num / num.sum(axis=-1, keepdims=True)
