"""Classification-based density ratios between sources, a reference law and
the target."""

from dataclasses import dataclass

import numpy as np

from ._rng import substream, subseed
from .regressors import fit_logistic

MIN_TARGET_FOR_DIRECT = 20


class SmallTargetError(ValueError):
    """Target sample too small to train a target-vs-reference classifier."""


@dataclass(frozen=True, eq=False)
class Reference:
    """Reference covariate sample and the per-source classification positives.

    ``source_rows[l]`` indexes the rows of source ``l`` used as positives;
    ``reference_rows[l]`` indexes the rows of source ``l`` pooled into the
    reference. ``self_site`` is the index of a source that *is* the reference
    (largest_source strategy), else ``None``.
    """

    X: np.ndarray
    source_rows: tuple
    reference_rows: tuple
    strategy: str
    self_site: int = None

    @property
    def n(self):
        return self.X.shape[0]


def build_reference(sources, strategy="pooled_split", fraction=0.5, seed=0):
    if not sources:
        raise ValueError("need at least one source")
    if strategy == "largest_source":
        sizes = [ds.n_total for ds in sources]
        big = int(np.argmax(sizes))
        src_rows, ref_rows = [], []
        for l, ds in enumerate(sources):
            allr = np.arange(ds.n_total)
            src_rows.append(allr)
            ref_rows.append(allr if l == big else np.arange(0))
        return Reference(sources[big].X, tuple(src_rows), tuple(ref_rows), strategy, big)
    if strategy != "pooled_split":
        raise ValueError(f"unknown reference strategy {strategy!r}")
    if not 0 < fraction < 1:
        raise ValueError("pooled_split fraction must lie in (0, 1)")
    src_rows, ref_rows, blocks = [], [], []
    for l, ds in enumerate(sources):
        perm = substream(seed, "reference", l).permutation(ds.n_total)
        k = int(round(fraction * ds.n_total))
        ref = np.sort(perm[:k])
        pos = np.sort(perm[k:])
        if ref.size == 0 or pos.size == 0:
            raise ValueError(f"site {ds.site_id}: too few rows for a pooled split")
        ref_rows.append(ref)
        src_rows.append(pos)
        blocks.append(ds.X[ref])
    return Reference(np.vstack(blocks), tuple(src_rows), tuple(ref_rows), strategy, None)


class RatioModel:
    """r(x) = prior_ratio * p(x) / (1 - p(x)), clipped to [1/clip, clip].

    ``classifier=None`` encodes the identity ratio (source equals reference).
    """

    def __init__(self, classifier, prior_ratio, clip):
        self.classifier = classifier
        self.prior_ratio = float(prior_ratio)
        self.clip = float(clip)

    def log_odds(self, X):
        if self.classifier is None:
            return np.zeros(np.asarray(X).shape[0])
        return self.classifier.decision_function(X)

    def evaluate(self, X):
        z = np.log(self.prior_ratio) + self.log_odds(X)
        r = np.exp(np.clip(z, -700.0, 700.0))
        return np.clip(r, 1.0 / self.clip, self.clip)

    __call__ = evaluate


def odds_ratio(p, prior_ratio=1.0):
    p = np.asarray(p, dtype=float)
    return prior_ratio * p / (1.0 - p)


def _classifier_settings(config):
    return dict(lambda_grid=None if config.classifier_penalty is None else list(config.classifier_penalty),
                folds=config.classifier_folds, n_lambdas=config.classifier_grid_size,
                span=CLASSIFIER_SPAN)


# Ratio classifiers search a short span near lambda_max; cross-validated
# log-loss bottoms out there when most W columns are noise.
CLASSIFIER_SPAN = (1e-1, 1e1)


def _fit_ratio(X_pos, X_ref, config, seed):
    X = np.vstack([X_pos, X_ref])
    g = np.concatenate([np.ones(len(X_pos)), np.zeros(len(X_ref))])
    clf = fit_logistic(X, g, seed=seed, **_classifier_settings(config))
    return RatioModel(clf, len(X_ref) / len(X_pos), config.ratio_clip)


def fit_source_ratios(sources, reference, config, seed=0):
    """One RatioModel per source: source rows (label 1) vs reference (label 0)."""
    if reference.n == 0:
        raise ValueError("empty reference sample")
    models = []
    for l, ds in enumerate(sources):
        if reference.self_site == l:
            models.append(RatioModel(None, 1.0, config.ratio_clip))
            continue
        pos = ds.X[reference.source_rows[l]]
        if pos.shape[0] == 0:
            raise ValueError(f"site {ds.site_id}: no classification positives")
        models.append(_fit_ratio(pos, reference.X, config, subseed(seed, "ratio", l)))
    return models


def ratio_matrix(models, X):
    return np.column_stack([m.evaluate(X) for m in models])


class WModel:
    """Target-vs-source ratio for one source, clipped to [clip^-2, clip^2]."""

    def __init__(self, option, index, source_ratios, rho=None, target_ratio=None, clip=50.0):
        self.option = option
        self.index = int(index)
        self.source_ratios = source_ratios
        self.rho = None if rho is None else np.asarray(rho, dtype=float)
        self.target_ratio = target_ratio
        self.clip = float(clip)

    def evaluate(self, X, R=None):
        """``R`` optionally supplies precomputed source ratios at ``X``."""
        if R is None:
            R = ratio_matrix(self.source_ratios, X)
        if self.option == "mixture_ratio":
            num = R @ self.rho
        else:
            num = self.target_ratio.evaluate(X)
        w = num / R[:, self.index]
        c2 = self.clip * self.clip
        return np.clip(w, 1.0 / c2, c2)

    __call__ = evaluate


def fit_w(target, sources, source_ratios, rho_hat, reference, config, seed=0):
    """List of WModel, one per source, under ``config.w_option``."""
    option = config.w_option
    rho = None
    if rho_hat is not None:
        rho = rho_hat.rho if hasattr(rho_hat, "rho") else np.asarray(rho_hat, dtype=float)
    target_ratio = None
    if option == "mixture_ratio":
        if rho is None:
            raise ValueError("mixture_ratio requires rho_hat")
    elif option == "direct_ratio":
        if target.n < MIN_TARGET_FOR_DIRECT:
            raise SmallTargetError(
                f"target has {target.n} rows; direct_ratio needs at least "
                f"{MIN_TARGET_FOR_DIRECT}, use w_option='mixture_ratio'")
        target_ratio = _fit_ratio(target.X, reference.X, config, subseed(seed, "ratio", "target"))
    else:
        raise ValueError(f"unknown w_option {option!r}")
    return [WModel(option, l, source_ratios, rho, target_ratio, config.ratio_clip)
            for l in range(len(sources))]
