"""Default generator constants for the synthetic multi-source design.

Everything the simulator needs that is not a sample size lives here so the
values can be swapped in one place.

Effective coefficients. Because W given A has the same law at every site,
the outcome at site l is linear in A with effective coefficient
``theta_l = alpha_l + B' gamma_l`` (B is the structural W-on-A map). The
defaults fix ``theta`` and back out ``alpha`` from the site-specific
``gamma``:

* sites 1 and 3 (the default target mixture) sit at ``THETA_MIX`` plus and
  minus a small drift, so the posterior mixture and the rho-weighted average
  differ slightly;
* site 5 points mostly against ``THETA_MIX`` (about -0.7 of it) with an
  orthogonal remainder, so the adversarial direction is strong but the
  minimum-norm point of the hull lies beyond s_max = 0.5;
* sites 2 and 4 are orthogonal to ``THETA_MIX`` under the target covariance.

All five rows have (nearly) the same target second moment, so the spread of
E[Y^2] across the uncertainty set is small and the worst-case MSE follows the
worst-case reward.
"""

import numpy as np

L = 5
N_SOURCE = 2000
N_LABELED = 500
N_TARGET = 2000
N_TUNING = 20
P = 200
Q = 5
K = 0.3
NOISE_Y = 0.5
NOISE_W = 0.1
SIGMA_A = 1.0
MU_RADIUS = 1.0
GAMMA_SCALE = 0.5
GAMMA_SIGN_SEED = 20240
RHO_STAR = (0.5, 0.0, 0.5, 0.0, 0.0)
DELTA_STAR = (0.0, 0.0, 0.0, 0.0, 1.0)
EPS_FLIP = 3.5
EPS_QUADRATIC = 0.5
JOINT_SHIFT = 1.5

THETA_MIX = np.array([3.0, 0.6, -0.6, 0.3, 0.0])
THETA = np.array([
    [3.0, 0.75, -0.45, 0.3, 0.0],
    [0.795, -0.866, 0.866, 2.129, 2.05],
    [3.0, 0.45, -0.75, 0.3, 0.0],
    [0.444, 1.692, 1.514, -0.757, -1.603],
    [-2.943, 0.396, 0.45, 2.047, -0.366],
])


def simplex_vertices(n, radius=1.0):
    """``n`` equidistant points in R^(n-1), centered, at distance ``radius``
    from the origin."""
    E = np.eye(n) - 1.0 / n
    U, _, _ = np.linalg.svd(E)
    V = E @ U[:, :n - 1]
    return radius * V / np.linalg.norm(V, axis=1, keepdims=True)


def default_mu(L=L, q=Q, radius=MU_RADIUS):
    """Site means: intercept 1, then regular-simplex vertices (padded or
    truncated to q - 1 coordinates)."""
    V = simplex_vertices(L, radius) if L > 1 else np.zeros((1, 1))
    out = np.zeros((L, q))
    out[:, 0] = 1.0
    d = min(q - 1, V.shape[1])
    out[:, 1:1 + d] = V[:, :d]
    return out


def default_gamma(L=L, p=P, q=Q, scale=GAMMA_SCALE, seed=GAMMA_SIGN_SEED):
    """Per-site sign flips on the five structural W columns."""
    rng = np.random.default_rng(seed)
    g = np.zeros((L, p - q))
    d = min(5, p - q)
    g[:, :d] = scale * rng.choice([-1.0, 1.0], size=(L, d))
    return g


def default_theta(L=L, q=Q):
    if L == THETA.shape[0] and q == THETA.shape[1]:
        return THETA.copy()
    out = np.zeros((L, q))
    r, c = min(L, THETA.shape[0]), min(q, THETA.shape[1])
    out[:r, :c] = THETA[:r, :c]
    return out
