import dataclasses

import numpy as np
import pandas as pd
import pytest

from dorm._rng import subseed
from _timing import building
from dorm.data_model import FitConfig
from dorm.pipeline import fit_dorm
from dorm.simulation import (DEFAULT_GRID, SimParams, evaluate, generate_sources, generate_target,
                             method_coefs, tuning_sample)


def small_params(**kw):
    base = dict(N_l=300, n_l=120, N_0=300, p=20)
    base.update(kw)
    return SimParams(**base)


@pytest.fixture(scope="session")
def small_sim():
    p = small_params(seed=11)
    return p, generate_sources(p), generate_target(p)


@pytest.fixture(scope="session")
def small_fit(small_sim):
    p, sources, st = small_sim
    cfg = FitConfig(s_max=0.2, seed=5)
    return fit_dorm(sources, st.target, cfg)


@dataclasses.dataclass
class Replication:
    params: SimParams
    sim_target: object
    fit: object
    seed: int
    index: int = 0


N_DEFAULT_REPS = 100


@pytest.fixture(scope="session")
def default_replications():
    """Default-generator fits shared by every study that needs them.

    Each replication fits the pipeline once; violation levels, tuning draws
    and the contaminated target reuse the same sources and target rows.
    """
    reps = []
    base = SimParams(seed=0)
    cfg = FitConfig()
    with building("default_replications"):
        for r in range(N_DEFAULT_REPS):
            seed = subseed(0, "rep", r)
            p = base.replace(seed=seed)
            sources = generate_sources(p)
            st = generate_target(p)
            fit = fit_dorm(sources, st.target, dataclasses.replace(cfg, seed=subseed(seed, "fit")))
            reps.append(Replication(p, st, fit, seed, r))
    return reps


STUDY_LEVELS = (0.0, 0.05, 0.1, 0.2, 0.35)
CONTAMINATED_LEVEL = 0.1


def _score(rep, p, st, s, rows, setting):
    coefs, s_hat = method_coefs(rep.fit, tuning_sample(p, st, s), DEFAULT_GRID)
    reports = evaluate(coefs, p, st, n_draws=100, seed=subseed(rep.seed, "eval"), s_star=s)
    for name, r in reports.items():
        rows.append({"rep": rep.index, "setting": setting, "violation": s, "method": name,
                     "std_mse_mean": r.std_mse_mean, "std_mse_worst": r.std_mse_worst,
                     "s_hat": s_hat if name == "dorm" else np.nan})


@pytest.fixture(scope="session")
def default_study(default_replications):
    """Tuned DORM and the baselines scored at each study level.

    ``setting`` is ``none`` (source-conditional violation) or
    ``conditional_mix`` (epsilon contamination at s* = 0.1). Each level gets
    fresh tuning labels on the shared tuning rows.
    """
    rows = []
    with building("default_study"):
        for rep in default_replications:
            for s in STUDY_LEVELS:
                _score(rep, rep.params, rep.sim_target, s, rows, "none")
            pc = rep.params.replace(contamination="conditional_mix", s_star=CONTAMINATED_LEVEL)
            _score(rep, pc, generate_target(pc), CONTAMINATED_LEVEL, rows, "conditional_mix")
    return pd.DataFrame(rows)


def rng(seed=0):
    return np.random.default_rng(seed)
