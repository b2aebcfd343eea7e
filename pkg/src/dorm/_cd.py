"""Compiled inner loops: covariance-form coordinate descent and the
projected-gradient solver for the capped-simplex quadratic program."""

import numpy as np
from numba import njit


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def cd_quadratic_l1(G, c, lam, pen, b, tol, max_sweeps):
    """Minimize 0.5 b'Gb - c'b + lam * sum(pen_j |b_j|) in place.

    Cycles over the active set between full sweeps. Stops when the largest
    coefficient change in a full sweep is below ``tol``.
    Returns the number of full sweeps performed.
    """
    d = b.shape[0]
    q = c - G @ b
    active = np.zeros(d, dtype=np.bool_)
    sweeps = 0
    while sweeps < max_sweeps:
        # full sweep
        max_delta = 0.0
        for j in range(d):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = b[j]
            r = q[j] + gjj * old
            new = _soft(r, lam * pen[j]) / gjj
            delta = new - old
            if delta != 0.0:
                b[j] = new
                for k in range(d):
                    q[k] -= G[k, j] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
            active[j] = new != 0.0
        sweeps += 1
        if max_delta < tol:
            break
        # inner loop over the active set
        while sweeps < max_sweeps:
            inner_delta = 0.0
            for j in range(d):
                if not active[j]:
                    continue
                gjj = G[j, j]
                old = b[j]
                r = q[j] + gjj * old
                new = _soft(r, lam * pen[j]) / gjj
                delta = new - old
                if delta != 0.0:
                    b[j] = new
                    for k in range(d):
                        q[k] -= G[k, j] * delta
                    if abs(delta) > inner_delta:
                        inner_delta = abs(delta)
            sweeps += 1
            if inner_delta < tol:
                break
    return sweeps


@njit(cache=True)
def cd_path(G, c, lambdas, pen, tol, max_sweeps):
    """Warm-started lasso path; ``lambdas`` should be decreasing."""
    d = c.shape[0]
    out = np.zeros((lambdas.shape[0], d))
    b = np.zeros(d)
    for i in range(lambdas.shape[0]):
        cd_quadratic_l1(G, c, lambdas[i], pen, b, tol, max_sweeps)
        out[i] = b
    return out


@njit(cache=True)
def project_capped_simplex(v, cap):
    """Euclidean projection onto {g >= 0, sum(g) <= cap}."""
    n = v.shape[0]
    pos = np.empty(n)
    total = 0.0
    for i in range(n):
        pos[i] = v[i] if v[i] > 0.0 else 0.0
        total += pos[i]
    if total <= cap:
        return pos
    # project onto {g >= 0, sum(g) = cap} by the sorted-threshold rule
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for k in range(n):
        css += u[k]
        t = (css - cap) / (k + 1)
        if u[k] - t >= 0.0:  # non-strict so cap = 0 projects to zero
            theta = t
    out = np.empty(n)
    for i in range(n):
        x = v[i] - theta
        out[i] = x if x > 0.0 else 0.0
    return out


@njit(cache=True)
def capped_simplex_pg(H, h, const, cap, g0, step, tol, max_iter):
    """Projected gradient for min_g g'Hg + 2h'g + const over the capped simplex.

    Returns (g, objective, iterations, gradient-mapping norm).
    """
    g = project_capped_simplex(g0, cap)
    it = 0
    gnorm = np.inf
    while it < max_iter:
        grad = 2.0 * (H @ g + h)
        g_new = project_capped_simplex(g - step * grad, cap)
        diff = g_new - g
        gnorm = np.sqrt(np.sum(diff * diff)) / step
        g = g_new
        it += 1
        if gnorm < tol:
            break
    obj = g @ (H @ g) + 2.0 * (h @ g) + const
    return g, obj, it, gnorm
