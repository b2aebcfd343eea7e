"""Command-line front end: simulate, fit, tune, evaluate, benchmark.

Exit codes: 0 ok, 2 validation failure, 3 numerical failure. Failures print
a JSON object ``{"error": kind, "message": ...}`` to stderr and remove any
outputs already written by the run.
"""

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from .data_model import (DataValidationError, FitConfig, atomic_write, dumps, load_config,
                         read_csv, write_csv)
from .pipeline import fit_model
from .simulation import SimParams, benchmark, evaluate, generate_sources, generate_target
from .tuning import DEFAULT_GRID, UninformativeSurrogateError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
SIM_KEYS = {f.name for f in dataclasses.fields(SimParams)}


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_files(path):
    path = Path(path)
    return sorted(path.glob("*.csv")) if path.is_dir() else [path]


class Run:
    """Collects written outputs so a failed run can remove them."""

    def __init__(self, command, out, seed):
        self.command = command
        self.out = Path(out)
        self.seed = seed
        self.inputs = {}
        self.outputs = []
        self.config = None
        self.started = time.time()

    def add_input(self, path):
        for f in _input_files(path):
            self.inputs[str(f)] = sha256(f)

    def write(self, name, text):
        path = self.out / name
        atomic_write(path, text)
        self.outputs.append(path)
        return path

    def cleanup(self):
        for p in self.outputs:
            p.unlink(missing_ok=True)
        self.outputs.clear()

    def manifest(self):
        """RunManifest: written last so it can reference every output."""
        doc = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "seed": self.seed,
            "version": _version(),
            "started": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            "wall_clock_seconds": round(time.time() - self.started, 3),
            "outputs": {str(p): sha256(p) for p in self.outputs},
        }
        self.write("manifest.json", dumps(doc) + "\n")


def parse_smax(text):
    """``0.1`` -> 0.1, ``0,0.1,0.2`` -> grid, ``default`` -> the standard grid."""
    if text is None:
        return None
    if text == "default":
        return tuple(DEFAULT_GRID)
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise DataValidationError(f"bad --smax value {text!r}") from exc
    if not vals:
        raise DataValidationError("empty --smax")
    return vals[0] if len(vals) == 1 else tuple(vals)


def _config(args, **overrides):
    cfg = load_config(args.config) if args.config else FitConfig()
    if args.seed is not None:
        overrides["seed"] = args.seed
    smax = parse_smax(args.smax)
    if smax is not None:
        overrides["s_max"] = smax
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _model_doc(model, fit, config):
    doc = model.to_dict()
    doc["baselines"] = fit.baselines()
    doc["config"] = config.to_dict()
    doc["flags"] = list(model.condition_flags)
    return doc


# ---------------------------------------------------------------- commands

def _sim_params(args):
    kw = {}
    if args.sim_config:
        with open(args.sim_config) as fh:
            kw = json.load(fh)
        unknown = sorted(set(kw) - SIM_KEYS)
        if unknown:
            raise DataValidationError(f"unknown simulation keys: {', '.join(unknown)}")
    if args.violation is not None:
        kw["s_star"] = args.violation
    if args.contamination is not None:
        kw["contamination"] = args.contamination
    kw["seed"] = 0 if args.seed is None else args.seed
    try:
        return SimParams(**kw)
    except (TypeError, ValueError) as exc:
        raise DataValidationError(str(exc)) from exc


def cmd_simulate(args, run):
    params = _sim_params(args)
    run.config = {"simulation": _sim_dict(params)}
    sources = generate_sources(params)
    st = generate_target(params)
    path = run.out / "data.csv"
    write_csv(path, sources, st.target)
    run.outputs.append(path)
    hidden = {"params": _sim_dict(params), **st.to_hidden()}
    run.write("hidden.json", dumps(hidden) + "\n")


def _sim_dict(params):
    return {f.name: getattr(params, f.name) for f in dataclasses.fields(params)}


def _fit_and_write(args, run, require_grid):
    config = _config(args)
    if require_grid and len(config.s_max_grid) < 2:
        config = dataclasses.replace(config, s_max=tuple(DEFAULT_GRID))
    run.config = config.to_dict()
    run.add_input(args.data)
    sources, target = read_csv(args.data)
    if target is None:
        raise DataValidationError("data has no target rows")
    model, fit = fit_model(sources, target, config)
    run.write("model.json", dumps(_model_doc(model, fit, config)) + "\n")
    if model.tuning is not None:
        run.write("tuning.json", dumps(model.tuning.to_dict()) + "\n")


def cmd_fit(args, run):
    _fit_and_write(args, run, require_grid=False)


def cmd_tune(args, run):
    _fit_and_write(args, run, require_grid=True)


def _load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    if "coef" not in doc:
        raise DataValidationError(f"{path}: not a model JSON (no 'coef')")
    coefs = {"dorm": np.asarray(doc["coef"], dtype=float)}
    for k, v in (doc.get("baselines") or {}).items():
        coefs[k] = np.asarray(v, dtype=float)
    return coefs


def _hidden_path(args):
    if args.hidden:
        return Path(args.hidden)
    cand = Path(args.data)
    cand = (cand if cand.is_dir() else cand.parent) / "hidden.json"
    return cand if cand.exists() else None


def cmd_evaluate(args, run):
    """Scores against hidden simulated outcomes (regenerated over ``--draws``
    delta draws) or, without them, against labeled tuning rows as a holdout."""
    coefs = _load_model(args.model)
    run.inputs[str(args.model)] = sha256(args.model)
    hidden = _hidden_path(args)
    rows = []
    if hidden is not None:
        run.inputs[str(hidden)] = sha256(hidden)
        with open(hidden) as fh:
            pdict = json.load(fh)["params"]
        params = SimParams(**{k: v for k, v in pdict.items() if k in SIM_KEYS})
        run.config = {"simulation": pdict, "draws": args.draws}
        st = generate_target(params)
        seed = params.seed if args.seed is None else args.seed
        reports = evaluate(coefs, params, st, n_draws=args.draws, seed=seed)
        for name, rep in reports.items():
            rows += [{"model": name, "draw": b, "std_mse": v} for b, v in enumerate(rep.per_draw)]
    else:
        run.add_input(args.data)
        _, target = read_csv(args.data)
        tun = None if target is None else target.tuning
        if tun is None or tun.y is None:
            raise DataValidationError("evaluate needs hidden.json or labeled tuning rows")
        run.config = {"holdout": "tuning rows"}
        var = float(np.var(tun.y))
        if var == 0:
            raise DataValidationError("holdout outcomes have zero variance")
        for name, c in coefs.items():
            if c.shape[0] != tun.A.shape[1]:
                raise DataValidationError(f"model {name}: coefficient length {c.shape[0]} "
                                          f"does not match q={tun.A.shape[1]}")
            rows.append({"model": name, "draw": 0,
                         "std_mse": float(np.mean((tun.y - tun.A @ c) ** 2)) / var})
    df = pd.DataFrame(rows, columns=["model", "draw", "std_mse"])
    run.write("metrics.csv", df.to_csv(index=False, float_format="%.17g"))


def cmd_benchmark(args, run):
    params = _sim_params(args)
    config = _config(args)
    run.config = {"fit": config.to_dict(), "simulation": _sim_dict(params),
                  "reps": args.reps, "draws": args.draws}
    if args.data:
        run.add_input(args.data)
    summary, per_rep = benchmark(params, config, n_reps=args.reps, n_draws=args.draws,
                                 threads=args.threads)
    run.write("metrics.csv", summary.to_csv(index=False, float_format="%.17g"))
    run.write("per_rep.csv", per_rep.to_csv(index=False, float_format="%.17g"))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "tune": cmd_tune,
            "evaluate": cmd_evaluate, "benchmark": cmd_benchmark}


def build_parser():
    ap = argparse.ArgumentParser(prog="dorm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=False, data_required=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", default=None, help="fit configuration JSON")
        p.add_argument("--smax", default=None,
                       help="single value, comma-separated grid, or 'default'")
        if data:
            p.add_argument("--data", required=data_required, help="CSV file or directory")

    def sim_flags(p):
        p.add_argument("--sim-config", default=None, help="simulation parameters JSON")
        p.add_argument("--violation", type=float, default=None)
        p.add_argument("--contamination", default=None)

    p = sub.add_parser("simulate", help="write a synthetic data set")
    common(p)
    sim_flags(p)
    for name, helptext in (("fit", "fit one model"), ("tune", "fit and tune s_max on the grid")):
        common(sub.add_parser(name, help=helptext), data=True, data_required=True)
    p = sub.add_parser("evaluate", help="score a model JSON")
    common(p, data=True, data_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--hidden", default=None, help="hidden-outcome JSON from simulate")
    p.add_argument("--draws", type=int, default=100)
    p = sub.add_parser("benchmark", help="simulation study over violation levels")
    common(p, data=True)
    sim_flags(p)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--draws", type=int, default=100)
    return ap


def _fail(kind, exc, code, run):
    if run is not None:
        run.cleanup()
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    run = None
    try:
        if args.threads < 1:
            raise DataValidationError("--threads must be positive")
        run = Run(args.command, args.out, args.seed)
        COMMANDS[args.command](args, run)
        run.manifest()
    except (DataValidationError, UninformativeSurrogateError, FileNotFoundError,
            json.JSONDecodeError, pd.errors.ParserError) as exc:
        return _fail("validation", exc, EXIT_VALIDATION, run)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", exc, EXIT_NUMERICAL, run)
    except ValueError as exc:
        return _fail("validation", exc, EXIT_VALIDATION, run)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
