"""scikit-learn style wrapper around the fit pipeline."""

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data_model import DataValidationError, FitConfig, TargetDataset
from .pipeline import fit_model


class DORMRegressor(RegressorMixin, BaseEstimator):
    """Distributionally robust linear predictor for a target population that
    mixes the source conditionals.

    Constructor parameters mirror :class:`FitConfig`. Unlike most regressors,
    ``fit`` takes a list of :class:`SourceDataset` and a
    :class:`TargetDataset` rather than ``(X, y)``; ``predict`` takes the
    core covariate matrix ``A`` (intercept column included).

    Fitted attributes: ``coef_``, ``s_max_``, ``gamma_``, ``rho_``,
    ``tuning_`` (``None`` without a grid), ``model_`` and ``fit_``.
    """

    def __init__(self, s_max=0.1, ridge_lambda_rho=None, rho_penalty_sign="minus",
                 reference_strategy="pooled_split", reference_fraction=0.5,
                 w_option="mixture_ratio", nuisance_learner="ridge", nuisance_lambda_grid=None,
                 classifier_penalty=None, classifier_grid_size=5, classifier_folds=3, folds=5,
                 ratio_clip=50.0, cross_fit=True, seed=0, outcome_penalty="none",
                 outcome_lambda_grid=None):
        self.s_max = s_max
        self.ridge_lambda_rho = ridge_lambda_rho
        self.rho_penalty_sign = rho_penalty_sign
        self.reference_strategy = reference_strategy
        self.reference_fraction = reference_fraction
        self.w_option = w_option
        self.nuisance_learner = nuisance_learner
        self.nuisance_lambda_grid = nuisance_lambda_grid
        self.classifier_penalty = classifier_penalty
        self.classifier_grid_size = classifier_grid_size
        self.classifier_folds = classifier_folds
        self.folds = folds
        self.ratio_clip = ratio_clip
        self.cross_fit = cross_fit
        self.seed = seed
        self.outcome_penalty = outcome_penalty
        self.outcome_lambda_grid = outcome_lambda_grid

    @classmethod
    def from_config(cls, config):
        return cls(**config.to_dict())

    def to_config(self):
        return FitConfig(**self.get_params())

    def fit(self, sources, target, tuning=None):
        """``tuning`` overrides the tuning sample attached to ``target``."""
        if not isinstance(target, TargetDataset):
            raise DataValidationError("target must be a TargetDataset")
        if tuning is not None:
            target = dataclasses.replace(target, tuning=tuning)
        config = self.to_config()
        model, fit = fit_model(list(sources), target, config)
        self.model_ = model
        self.fit_ = fit
        self.coef_ = np.asarray(model.coef)
        self.s_max_ = model.s_max
        self.gamma_ = model.gamma
        self.rho_ = np.mean(fit.rhos, axis=0)
        self.tuning_ = model.tuning
        self.n_features_in_ = self.coef_.shape[0]
        return self

    def predict(self, A):
        check_is_fitted(self, "coef_")
        A = check_array(A, dtype=float)
        if A.shape[1] != self.n_features_in_:
            raise ValueError(f"A has {A.shape[1]} columns, expected {self.n_features_in_}")
        return A @ self.coef_

    def score(self, A, y, sample_weight=None):
        return super().score(A, y, sample_weight=sample_weight)
