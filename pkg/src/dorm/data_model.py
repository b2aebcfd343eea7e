"""Containers for multi-site data and fit configuration, validation, and
CSV/JSON persistence."""

import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

ROLES = ("labeled", "unlabeled", "target", "tuning")


class DataValidationError(ValueError):
    """Input data or configuration failed validation."""


def _frozen(a, ndim):
    a = np.array(a, dtype=float, copy=True)
    if a.ndim == 1 and ndim == 2:
        a = a.reshape(-1, 1) if a.size else a.reshape(0, 0)
    if a.ndim != ndim:
        raise DataValidationError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SourceDataset:
    """One source site: covariates ``(A, W)`` for ``n_total`` rows, outcomes
    for the first ``n_labeled`` rows.

    ``A`` must carry the intercept as its first column.
    """

    site_id: str
    A: np.ndarray
    W: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "site_id", str(self.site_id))
        A = _frozen(self.A, 2)
        W = np.zeros((A.shape[0], 0)) if self.W is None else self.W
        W = _frozen(W, 2) if np.size(W) else _frozen(np.zeros((A.shape[0], 0)), 2)
        y = _frozen(np.ravel(self.y), 1)
        if W.shape[0] != A.shape[0]:
            raise DataValidationError(
                f"site {self.site_id}: A has {A.shape[0]} rows but W has {W.shape[0]}")
        if y.shape[0] > A.shape[0]:
            raise DataValidationError(
                f"site {self.site_id}: more labels ({y.shape[0]}) than rows ({A.shape[0]})")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "y", y)

    @property
    def n_labeled(self):
        return self.y.shape[0]

    @property
    def n_total(self):
        return self.A.shape[0]

    @property
    def q(self):
        return self.A.shape[1]

    @property
    def p(self):
        return self.A.shape[1] + self.W.shape[1]

    @property
    def X(self):
        return np.hstack([self.A, self.W])

    @property
    def X_labeled(self):
        n = self.n_labeled
        return np.hstack([self.A[:n], self.W[:n]])

    def subset(self, labeled_idx, unlabeled_idx=()):
        """New dataset from labeled row indices (into the labeled prefix)
        followed by unlabeled row indices (absolute)."""
        labeled_idx = np.asarray(labeled_idx, dtype=int)
        unlabeled_idx = np.asarray(unlabeled_idx, dtype=int)
        rows = np.concatenate([labeled_idx, unlabeled_idx])
        return SourceDataset(self.site_id, self.A[rows], self.W[rows], self.y[labeled_idx])


@dataclass(frozen=True, eq=False)
class TuningSample:
    """A small target-like sample with true labels ``y`` or a surrogate ``s``."""

    A: np.ndarray
    y: np.ndarray = None
    s: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A, 2))
        for name in ("y", "s"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(np.ravel(v), 1))
        if (self.y is None) == (self.s is None):
            raise DataValidationError("tuning sample needs exactly one of y or s")
        v = self.y if self.y is not None else self.s
        if v.shape[0] != self.A.shape[0]:
            raise DataValidationError("tuning outcome length differs from A rows")
        if self.A.shape[0] < 2:
            raise DataValidationError("tuning sample needs at least 2 rows")

    @property
    def n(self):
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class TargetDataset:
    A0: np.ndarray
    W0: np.ndarray
    tuning: TuningSample = None

    def __post_init__(self):
        A0 = _frozen(self.A0, 2)
        W0 = self.W0 if self.W0 is not None and np.size(self.W0) else np.zeros((A0.shape[0], 0))
        W0 = _frozen(W0, 2)
        if W0.shape[0] != A0.shape[0]:
            raise DataValidationError("target A0 and W0 row counts differ")
        object.__setattr__(self, "A0", A0)
        object.__setattr__(self, "W0", W0)

    @property
    def n(self):
        return self.A0.shape[0]

    @property
    def X(self):
        return np.hstack([self.A0, self.W0])


@dataclass(frozen=True)
class FitConfig:
    """Pipeline settings; field names double as the JSON config keys.

    ``s_max`` is a single value in [0, 1] or a list of candidates (tuned on
    the tuning sample). ``ridge_lambda_rho=None`` means ``N_0 ** -0.5``.
    ``classifier_penalty`` / ``nuisance_lambda_grid`` / ``outcome_lambda_grid``
    set to ``None`` build data-driven log grids.
    """

    s_max: object = 0.1
    ridge_lambda_rho: float = None
    rho_penalty_sign: str = "minus"
    reference_strategy: str = "pooled_split"
    reference_fraction: float = 0.5
    w_option: str = "mixture_ratio"
    nuisance_learner: str = "ridge"
    nuisance_lambda_grid: list = None
    classifier_penalty: list = None
    classifier_grid_size: int = 5
    classifier_folds: int = 3
    folds: int = 5
    ratio_clip: float = 50.0
    cross_fit: bool = True
    seed: int = 0
    outcome_penalty: str = "none"
    outcome_lambda_grid: list = None

    def __post_init__(self):
        errs = []
        if isinstance(self.s_max, (list, tuple)):
            grid = [float(v) for v in self.s_max]
            if not grid or any(not 0 <= v <= 1 for v in grid):
                errs.append("s_max grid must be nonempty with values in [0, 1]")
            object.__setattr__(self, "s_max", tuple(grid))
        elif not 0 <= float(self.s_max) <= 1:
            errs.append("s_max must lie in [0, 1]")
        if self.ridge_lambda_rho is not None and self.ridge_lambda_rho < 0:
            errs.append("ridge_lambda_rho must be nonnegative")
        if self.rho_penalty_sign not in ("minus", "plus"):
            errs.append("rho_penalty_sign must be 'minus' or 'plus'")
        if self.reference_strategy not in ("largest_source", "pooled_split"):
            errs.append("reference_strategy must be 'largest_source' or 'pooled_split'")
        if self.reference_strategy == "pooled_split" and not 0 < self.reference_fraction < 1:
            errs.append("reference_fraction must lie in (0, 1)")
        if self.w_option not in ("direct_ratio", "mixture_ratio"):
            errs.append("w_option must be 'direct_ratio' or 'mixture_ratio'")
        if self.nuisance_learner not in ("ols", "ridge", "lasso"):
            errs.append("nuisance_learner must be one of ols, ridge, lasso")
        if self.outcome_penalty not in ("none", "ridge", "lasso"):
            errs.append("outcome_penalty must be one of none, ridge, lasso")
        for name in ("nuisance_lambda_grid", "classifier_penalty", "outcome_lambda_grid"):
            grid = getattr(self, name)
            if grid is not None:
                grid = [float(v) for v in np.atleast_1d(grid)]
                if not grid or any(v <= 0 for v in grid):
                    errs.append(f"{name} must be nonempty and positive")
                object.__setattr__(self, name, tuple(grid))
        if not self.ratio_clip > 1:
            errs.append("ratio_clip must exceed 1")
        if self.folds < 2 or self.classifier_folds < 2:
            errs.append("folds must be at least 2")
        if self.classifier_grid_size < 1:
            errs.append("classifier_grid_size must be positive")
        if errs:
            raise DataValidationError("; ".join(errs))

    @property
    def s_max_grid(self):
        return self.s_max if isinstance(self.s_max, tuple) else (float(self.s_max),)

    def to_dict(self):
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataValidationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def load_config(path):
    with open(path) as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise DataValidationError("config must be a JSON object")
    return FitConfig.from_dict(d)


@dataclass
class ValidationReport:
    ok: bool
    checks: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def raise_if_failed(self):
        if not self.ok:
            raise DataValidationError("; ".join(self.errors))


def _intercept_ok(A):
    return A.shape[1] >= 1 and A.shape[0] > 0 and np.all(A[:, 0] == 1.0)


def validate(datasets, target, config=None):
    """Check cross-site consistency and container invariants.

    Returns a :class:`ValidationReport`; nothing is raised here.
    """
    checks, errors = [], []
    if not datasets:
        errors.append("no source datasets")
    ref = datasets[0] if datasets else None
    for ds in datasets:
        tag = f"site {ds.site_id}"
        if ds.q != ref.q or ds.W.shape[1] != ref.W.shape[1]:
            errors.append(f"{tag}: dimension mismatch (q={ds.q}, p-q={ds.W.shape[1]} vs "
                          f"q={ref.q}, p-q={ref.W.shape[1]})")
        if not _intercept_ok(ds.A):
            errors.append(f"{tag}: missing intercept (first column of A must be 1)")
        if ds.n_labeled < 1:
            errors.append(f"{tag}: empty labeled set")
        if not (np.all(np.isfinite(ds.A)) and np.all(np.isfinite(ds.W)) and np.all(np.isfinite(ds.y))):
            errors.append(f"{tag}: non-finite entries")
        checks.append({"site": ds.site_id, "q": ds.q, "p": ds.p,
                       "n_labeled": ds.n_labeled, "n_total": ds.n_total})
    if len({ds.site_id for ds in datasets}) != len(datasets):
        errors.append("duplicate site identifiers")
    if target is not None:
        if target.n < 1:
            errors.append("target: empty")
        if ref is not None and (target.A0.shape[1] != ref.q or target.W0.shape[1] != ref.W.shape[1]):
            errors.append("target: dimension mismatch with sources")
        if target.n and not _intercept_ok(target.A0):
            errors.append("target: missing intercept (first column of A must be 1)")
        if not (np.all(np.isfinite(target.A0)) and np.all(np.isfinite(target.W0))):
            errors.append("target: non-finite entries")
        tun = target.tuning
        if tun is not None:
            if ref is not None and tun.A.shape[1] != ref.q:
                errors.append("tuning: dimension mismatch with sources")
            vals = tun.y if tun.y is not None else tun.s
            if not (np.all(np.isfinite(tun.A)) and np.all(np.isfinite(vals))):
                errors.append("tuning: non-finite entries")
        checks.append({"site": "target", "n": target.n})
    if config is not None and config.cross_fit:
        for ds in datasets:
            if ds.n_labeled < 4:
                errors.append(f"site {ds.site_id}: cross-fitting needs at least 4 labeled rows")
    return ValidationReport(ok=not errors, checks=checks, errors=errors)


# ---------------------------------------------------------------- CSV layout

def _columns(q, pw, surrogate=False):
    cols = ["site", "role", "y"] + [f"a_{j + 1}" for j in range(q)] + [f"w_{j + 1}" for j in range(pw)]
    if surrogate:
        cols.append("s")
    return cols


def to_frame(sources, target=None):
    """Long-format frame in the ``site, role, y, a_*, w_*`` layout.

    A surrogate tuning outcome goes into an extra ``s`` column.
    """
    q = sources[0].q
    pw = sources[0].W.shape[1]
    surrogate = target is not None and target.tuning is not None and target.tuning.s is not None
    blocks = []

    def block(site, roles, y, A, W, s=None):
        n = A.shape[0]
        df = pd.DataFrame(np.hstack([A, W]) if W is not None else A,
                          columns=_columns(q, pw)[3:3 + q + (pw if W is not None else 0)])
        df.insert(0, "y", y)
        df.insert(0, "role", roles)
        df.insert(0, "site", [site] * n)
        if surrogate:
            df["s"] = np.nan if s is None else s
        return df

    for ds in sources:
        n, N = ds.n_labeled, ds.n_total
        y = np.concatenate([ds.y, np.full(N - n, np.nan)])
        roles = ["labeled"] * n + ["unlabeled"] * (N - n)
        blocks.append(block(ds.site_id, roles, y, ds.A, ds.W))
    if target is not None:
        blocks.append(block("target", ["target"] * target.n, np.full(target.n, np.nan),
                            target.A0, target.W0))
        tun = target.tuning
        if tun is not None:
            y = tun.y if tun.y is not None else np.full(tun.n, np.nan)
            blocks.append(block("target", ["tuning"] * tun.n, y, tun.A, None, tun.s))
    df = pd.concat(blocks, ignore_index=True)
    return df[_columns(q, pw, surrogate)]


def write_csv(path, sources, target=None):
    df = to_frame(sources, target)
    atomic_write(path, df.to_csv(index=False, float_format="%.17g", na_rep=""))


def from_frame(df):
    """Inverse of :func:`to_frame`; returns ``(sources, target)``."""
    required = {"site", "role", "y"}
    missing = required - set(df.columns)
    if missing:
        raise DataValidationError(f"missing columns: {sorted(missing)}")
    bad_roles = set(df["role"].unique()) - set(ROLES)
    if bad_roles:
        raise DataValidationError(f"unknown roles: {sorted(bad_roles)}")
    acols = sorted((c for c in df.columns if c.startswith("a_")), key=lambda c: int(c[2:]))
    wcols = sorted((c for c in df.columns if c.startswith("w_")), key=lambda c: int(c[2:]))
    if not acols:
        raise DataValidationError("no a_* columns")
    df = df.copy()
    df["site"] = df["site"].astype(str)
    sources = []
    site_order = list(dict.fromkeys(df.loc[df["role"].isin(["labeled", "unlabeled"]), "site"]))
    for site in site_order:
        lab = df[(df["site"] == site) & (df["role"] == "labeled")]
        unl = df[(df["site"] == site) & (df["role"] == "unlabeled")]
        if lab["y"].isna().any():
            raise DataValidationError(f"site {site}: missing y in labeled rows")
        rows = pd.concat([lab, unl])
        sources.append(SourceDataset(site, rows[acols].to_numpy(float),
                                     rows[wcols].to_numpy(float), lab["y"].to_numpy(float)))
    tgt = df[df["role"] == "target"]
    tun = df[df["role"] == "tuning"]
    tuning = None
    if len(tun):
        has_y = tun["y"].notna().all()
        s = tun["s"].to_numpy(float) if "s" in tun.columns and tun["s"].notna().all() else None
        tuning = TuningSample(tun[acols].to_numpy(float),
                              y=tun["y"].to_numpy(float) if has_y and s is None else None,
                              s=s)
    target = None
    if len(tgt):
        target = TargetDataset(tgt[acols].to_numpy(float), tgt[wcols].to_numpy(float), tuning)
    return sources, target


def _read(path):
    # the default fast parser can be off by one ulp
    return pd.read_csv(path, dtype={"site": str}, float_precision="round_trip")


def read_csv(path):
    """Read one CSV file or every ``*.csv`` in a directory (one per site)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataValidationError(f"no CSV files in {path}")
        df = pd.concat([_read(f) for f in files], ignore_index=True)
    else:
        df = _read(path)
    return from_frame(df)


# ---------------------------------------------------------------- JSON / IO

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def atomic_write(path, text):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
