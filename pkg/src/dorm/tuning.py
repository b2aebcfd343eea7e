"""Selection of s_max from a candidate grid on a small tuning sample."""

import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(11))
UNINFORMATIVE_CORR = 0.05
TIE_REL = 1e-12


class UninformativeSurrogateError(ValueError):
    pass


class UninformativeSurrogateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TuningResult:
    s_hat: float
    scores: dict
    criterion: str

    def to_dict(self):
        return {"s_hat": self.s_hat, "criterion": self.criterion,
                "scores": {repr(float(k)): float(v) for k, v in sorted(self.scores.items())}}


def _coef(m):
    return np.asarray(getattr(m, "coef", m), dtype=float)


def _pick(scores, best_is_min):
    cands = sorted(scores)
    vals = np.array([scores[c] for c in cands])
    best = vals.min() if best_is_min else vals.max()
    slack = TIE_REL * max(1.0, abs(best))
    ok = vals <= best + slack if best_is_min else vals >= best - slack
    return cands[int(np.flatnonzero(ok)[0])]


def tune_mse(models, tuning):
    """argmin over candidates of the tuning-sample mean squared error;
    near-ties go to the smallest candidate."""
    if not models:
        raise ValueError("empty candidate grid")
    if tuning.y is None:
        raise ValueError("tune_mse needs labeled tuning outcomes")
    A, y = tuning.A, tuning.y
    scores = {float(s): float(np.mean((y - A @ _coef(m)) ** 2)) for s, m in models.items()}
    return TuningResult(_pick(scores, True), scores, "mse")


def tune_surrogate(models, tuning):
    """argmax over candidates of |corr(s, prediction)|."""
    if not models:
        raise ValueError("empty candidate grid")
    s = tuning.s if tuning.s is not None else None
    if s is None:
        raise ValueError("tune_surrogate needs a surrogate outcome")
    if np.std(s) == 0:
        raise UninformativeSurrogateError("uninformative surrogate: zero variance")
    scores = {}
    for cand, m in models.items():
        pred = tuning.A @ _coef(m)
        sd = np.std(pred)
        scores[float(cand)] = 0.0 if sd == 0 else float(abs(np.corrcoef(s, pred)[0, 1]))
    if all(np.std(tuning.A @ _coef(m)) == 0 for m in models.values()):
        raise UninformativeSurrogateError("uninformative surrogate: constant predictions")
    if max(scores.values()) < UNINFORMATIVE_CORR:
        warnings.warn("uninformative surrogate: every |correlation| is below "
                      f"{UNINFORMATIVE_CORR}", UninformativeSurrogateWarning, stacklevel=2)
    return TuningResult(_pick(scores, False), scores, "surrogate_correlation")


def tune(models, tuning):
    """Dispatch on which outcome the tuning sample carries."""
    return tune_mse(models, tuning) if tuning.y is not None else tune_surrogate(models, tuning)
