"""Mixture-weight recovery studies, run across worker processes.

Every replication is seeded by its index, so results do not depend on the
number of workers.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache

import numpy as np

from dorm._rng import subseed
from dorm.data_model import FitConfig
from dorm.density_ratio import build_reference, fit_source_ratios, ratio_matrix
from dorm.dr_estimation import rho_lambda
from dorm.mixture_weights import estimate_rho
from dorm.simulation import SimParams, generate_sources, generate_target, oracle_ratios
from _timing import building

BASE = SimParams(rho_star=(0.5, 0, 0.5, 0, 0), n_tuning=0)


def _map(fn, jobs):
    workers = os.cpu_count() or 1
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=4))


def _oracle_rep(job):
    n0, r = job
    p = BASE.replace(N_0=n0, seed=subseed(8, "rho-oracle", n0, r))
    A0 = generate_target(p).target.A0
    return estimate_rho(oracle_ratios(p, A0), n0 ** -0.5).rho - np.asarray(p.rho_star)


def _classifier_rep(r):
    cfg = FitConfig()
    p = BASE.replace(seed=subseed(8, "rho-classifier", r))
    sources = generate_sources(p)
    target = generate_target(p).target
    ref = build_reference(sources, cfg.reference_strategy, cfg.reference_fraction,
                          subseed(p.seed, "reference"))
    ratios = fit_source_ratios(sources, ref, cfg, subseed(p.seed, "ratios"))
    rho = estimate_rho(ratio_matrix(ratios, target.X), rho_lambda(cfg, target.n)).rho
    return rho - np.asarray(p.rho_star)


@lru_cache(maxsize=None)
def oracle_errors(n0, reps=200):
    """reps x L differences rho_hat - rho_star with oracle density ratios."""
    with building(("rho_oracle", n0, reps)):
        return np.array(_map(_oracle_rep, [(n0, r) for r in range(reps)]))


@lru_cache(maxsize=None)
def classifier_errors(reps=200):
    """Same with classifier-estimated ratios at the default sizes."""
    with building(("rho_classifier", reps)):
        return np.array(_map(_classifier_rep, range(reps)))
