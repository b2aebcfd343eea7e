"""End-to-end fit: nuisances, coefficient rows, Gamma, and the s_max sweep."""

import dataclasses
from dataclasses import dataclass, field

from .data_model import DataValidationError, validate
from .dr_estimation import cross_fit, dr_betas, fit_nuisances, regularized_betas
from .group_dro import baselines, compute_gamma_matrix, fit_smax
from .tuning import tune


@dataclass(eq=False)
class DormFit:
    """Shared pieces for every s_max candidate; only the QP reruns per value."""

    betasets: tuple
    gamma_matrices: tuple
    rhos: tuple
    nuisances: tuple
    config: object
    flags: tuple = ()
    cache: dict = field(default_factory=dict)

    @property
    def cross_fitted(self):
        return len(self.betasets) == 2

    def model(self, s_max):
        s_max = float(s_max)
        if s_max not in self.cache:
            self.cache[s_max] = fit_smax(self.betasets, s_max, self.gamma_matrices,
                                         self.rhos, self.flags, seed=self.config.seed)
        return self.cache[s_max]

    def models(self, grid):
        return {float(s): self.model(s) for s in grid}

    def baselines(self):
        return baselines(self.betasets, self.rhos, self.gamma_matrices, seed=self.config.seed)

    def tuned(self, tuning, grid=None):
        """Model at the s_max chosen on ``tuning`` plus the TuningResult."""
        grid = self.config.s_max_grid if grid is None else grid
        res = tune(self.models(grid), tuning)
        m = self.model(res.s_hat)
        return m, res


def _beta_fn(config, tuning):
    if config.outcome_penalty == "none":
        return dr_betas

    def fn(target, sources, nuis, fold_tag="full"):
        grid = None if config.outcome_lambda_grid is None else list(config.outcome_lambda_grid)
        return regularized_betas(target, sources, nuis, config.outcome_penalty, grid,
                                 tuning=tuning, folds=config.folds, seed=config.seed,
                                 fold_tag=fold_tag)
    return fn


def fit_dorm(sources, target, config, partition=None):
    """Validate, then build the per-fold BetaSets and Gamma matrices."""
    report = validate(sources, target, config)
    if not report.ok:
        raise DataValidationError("; ".join(report.errors))
    beta_fn = _beta_fn(config, target.tuning)
    if config.cross_fit:
        cf = cross_fit(sources, target, config, partition=partition, beta_fn=beta_fn)
        betasets, nuisances = cf.folds, cf.nuisances
    else:
        nuis = fit_nuisances(sources, target, config, config.seed)
        betasets, nuisances = (beta_fn(target, sources, nuis),), (nuis,)
    gms = tuple(compute_gamma_matrix(b) for b in betasets)
    rhos = tuple(n.rho.rho for n in nuisances)
    flags = tuple(dict.fromkeys(f for n in nuisances for f in n.flags))
    return DormFit(tuple(betasets), gms, rhos, tuple(nuisances), config, flags)


def fit_model(sources, target, config):
    """Single model: tuned over the s_max grid when one is configured and a
    tuning sample exists, else at the configured value."""
    fit = fit_dorm(sources, target, config)
    grid = config.s_max_grid
    if len(grid) > 1:
        if target.tuning is None:
            raise DataValidationError("an s_max grid needs a tuning sample")
        model, res = fit.tuned(target.tuning, grid)
        return dataclasses.replace(model, tuning=res), fit
    return fit.model(grid[0]), fit
