"""Command-line interface: ``edpmed simulate | fit | effects | report``.

Every subcommand reads an optional JSON config with one section per
subcommand; flags override config keys. Diagnostics go to stderr, and
stdout lists only the paths of the artifacts written.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data_model import (LANDMARKS_FILE, SUBJECTS_FILE, AgeGrid, CovariateSchema, DataError,
                         build_age_grid, load_cohort, write_cohort)
from .gcomp import GCompConfig, Regime, estimate_effects, write_effects
from .report import write_report
from .sampler import (ChainConfig, CohortArrays, PosteriorDrawStore, default_priors, run_chain)
from .spline import default_knots, make_basis
from .state import ModelSpec, PriorConfig, Truncation
from .survival import HazardPartition, default_partition
from .synthetic import REFERENCE_MODELS, TrueModel, generate_cohort, truth_effects

log = logging.getLogger("edpmed")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

SCHEMA_FILE = "schema.json"
TRUTH_FILE = "truth.json"
MANIFEST_FILE = "manifest.json"
DRAWS_FILE = "draws.jsonl"
MODEL_FILE = "model.json"
ACCEPTANCE_FILE = "acceptance.csv"
TRACE_FILE = "trace.csv"
EFFECTS_FILE = "effects.csv"
REPORT_FILE = "report.html"


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


# ------------------------------------------------------------------ config

def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _section(cfg, name) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError("expected an object", name)
    return sec


_NOTHING = object()


def _get(sec, key, kind, default=_NOTHING, where=""):
    name = f"{where}.{key}" if where else key
    if key not in sec:
        if default is _NOTHING:
            raise ConfigError("required key is missing", name)
        return default
    v = sec[key]
    ok = {
        "int": isinstance(v, int) and not isinstance(v, bool),
        "float": isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v),
        "bool": isinstance(v, bool),
        "str": isinstance(v, str),
        "list": isinstance(v, list),
        "dict": isinstance(v, dict),
        "any": True,
    }[kind]
    if not ok:
        raise ConfigError(f"expected {kind}, got {json.dumps(v)}", name)
    return float(v) if kind == "float" else v


def _positive_int(sec, key, default, where):
    v = _get(sec, key, "int", default, where)
    if v < 1:
        raise ConfigError("must be >= 1", f"{where}.{key}")
    return v


# ----------------------------------------------------------------- helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _update_manifest(out: Path, phase: str, entry: dict) -> Path:
    path = out / MANIFEST_FILE
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
    manifest["software_version"] = __version__
    manifest.setdefault("phases", {})[phase] = entry
    return _write_json(path, manifest)


def _guard(paths, force):
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise ConfigError(f"refusing to overwrite {existing[0]}; pass --force to replace it")


def _write_csv(path, rows, columns) -> Path:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return Path(path)


def _schema_for(data_dir: Path, cfg: dict) -> CovariateSchema:
    if "schema" in cfg:
        try:
            return CovariateSchema.from_dict(_get(cfg, "schema", "dict"))
        except DataError as exc:
            raise ConfigError(str(exc), "schema") from None
    path = data_dir / SCHEMA_FILE
    if not path.exists():
        raise DataError(f"no schema: add a 'schema' section to the config or provide {path}")
    return CovariateSchema.from_dict(json.loads(path.read_text(encoding="utf-8")))


# -------------------------------------------------------------- subcommands

def cmd_simulate(args, cfg) -> list[Path]:
    sec = _section(cfg, "simulate")
    out = Path(args.out or _get(sec, "out", "str", "simulated", "simulate"))
    seed = args.seed
    model_spec = _get(sec, "model", "any", "two_cluster", "simulate")
    if isinstance(model_spec, str):
        if model_spec not in REFERENCE_MODELS:
            raise ConfigError(f"unknown model {model_spec!r}; choose from "
                              f"{sorted(REFERENCE_MODELS)}", "simulate.model")
        model = REFERENCE_MODELS[model_spec]()
    elif isinstance(model_spec, dict):
        try:
            model = TrueModel.from_dict(model_spec)
        except (KeyError, TypeError, ValueError, AssertionError) as exc:
            raise ConfigError(f"invalid model description ({exc})", "simulate.model") from None
    else:
        raise ConfigError("expected a model name or object", "simulate.model")
    n = _positive_int(sec, "n", 200, "simulate")
    quad = _get(sec, "quadrature", "dict", {}, "simulate")
    quad = {k: _positive_int(quad, k, d, "simulate.quadrature")
            for k, d in (("gh_nodes", 32), ("re_nodes", 16))}
    targets = [SUBJECTS_FILE, LANDMARKS_FILE, SCHEMA_FILE, TRUTH_FILE]
    _guard([out / t for t in targets], args.force)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    cohort = generate_cohort(model, n, seed)
    t1 = time.perf_counter()
    paths = list(write_cohort(cohort, out))
    paths.append(_write_json(out / SCHEMA_FILE, model.spec.schema.to_dict()))
    truth = {"model": model.to_dict(), "n": n, "seed": seed, "truths": []}
    if model.grid and model.target_age is not None:
        try:
            truth["truths"].append(truth_effects(model, **quad))
        except ValueError as exc:
            log.info("no quadrature truth: %s", exc)
    paths.append(_write_json(out / TRUTH_FILE, truth))
    t2 = time.perf_counter()
    paths.append(_update_manifest(out, "simulate", {
        "config": sec, "seed": seed,
        "outputs": {p.name: _sha256(p) for p in paths},
        "timing_seconds": {"generate": t1 - t0, "truth": t2 - t1},
    }))
    return paths


def _build_spec(cohort, sec) -> ModelSpec:
    where = "fit"
    trunc = _get(sec, "truncation", "dict", {}, where)
    try:
        truncation = Truncation(_positive_int(trunc, "N", 10, "fit.truncation"),
                                _positive_int(trunc, "M", 10, "fit.truncation"))
    except ValueError as exc:
        raise ConfigError(str(exc), "fit.truncation") from None
    spl = _get(sec, "spline", "dict", {}, where)
    knots = _get(spl, "knots", "any", "auto", "fit.spline")
    floor = _get(spl, "eigen_floor", "float", 1e-10, "fit.spline")
    try:
        if knots == "auto":
            ages = cohort.landmark_ages()
            knots = default_knots(ages, _positive_int(spl, "D", 4, "fit.spline"))
        elif not isinstance(knots, list):
            raise ConfigError("expected 'auto' or a list of ages", "fit.spline.knots")
        basis = make_basis(knots, floor)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "fit.spline") from None
    haz = _get(sec, "hazard", "dict", {}, where)
    try:
        if "cutpoints" in haz:
            partition = HazardPartition(np.asarray(_get(haz, "cutpoints", "list", where="fit.hazard"),
                                                   dtype=float))
            partition.check_ages(cohort.event_ages(events_only=False))
        else:
            partition = default_partition(cohort, _positive_int(haz, "B", 5, "fit.hazard"))
    except ValueError as exc:
        raise ConfigError(str(exc), "fit.hazard") from None
    return ModelSpec(cohort.schema, basis, partition, truncation)


def _priors(data, spec, sec) -> PriorConfig:
    over = dict(_get(sec, "priors", "dict", {}, "fit"))
    known = set(PriorConfig.__dataclass_fields__)
    for k in over:
        if k not in known:
            raise ConfigError(f"unknown prior hyperparameter; known keys are {sorted(known)}",
                              f"fit.priors.{k}")
    try:
        return default_priors(data, spec, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "fit.priors") from None


def _chain_seed(seed, chain):
    return [int(seed), int(chain)]


def cmd_fit(args, cfg) -> list[Path]:
    sec = _section(cfg, "fit")
    data_dir = Path(args.path or _get(sec, "data", "str", where="fit"))
    out = Path(args.out or _get(sec, "out", "str", str(data_dir / "fit"), "fit"))
    seed = args.seed
    chain_cfg = ChainConfig(
        burn_in=_get(sec, "burn_in", "int", 1000, "fit"),
        keep=_get(sec, "keep", "int", 1000, "fit"),
        thin=_positive_int(sec, "thin", 1, "fit"),
        adapt=_get(sec, "adapt", "bool", True, "fit"),
        update_alpha_beta=_get(sec, "update_alpha_beta", "bool", False, "fit"),
    )
    n_chains = _positive_int(sec, "chains", 1, "fit")
    targets = [out / f for f in (DRAWS_FILE, ACCEPTANCE_FILE, TRACE_FILE, MODEL_FILE)]
    _guard(targets, args.force)

    t0 = time.perf_counter()
    schema = _schema_for(data_dir, cfg)
    age_bound = _get(sec, "age_bound", "float", math.inf, "fit")
    cohort = load_cohort(data_dir, schema, age_bound)
    spec = _build_spec(cohort, sec)
    data = CohortArrays.from_cohort(cohort, spec)
    priors = _priors(data, spec, sec)
    t1 = time.perf_counter()

    def one(c):
        return run_chain(data, spec, priors, chain_cfg, seed=_chain_seed(seed, c), chain=c)

    workers = max(1, min(args.threads, n_chains))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stores = list(pool.map(one, range(n_chains)))
    else:
        stores = [one(c) for c in range(n_chains)]
    store = stores[0]
    for s in stores[1:]:
        store.extend(s)
    t2 = time.perf_counter()

    out.mkdir(parents=True, exist_ok=True)
    paths = [store.write_jsonl(out / DRAWS_FILE)]
    paths.append(_write_csv(out / ACCEPTANCE_FILE, store.acceptance,
                            ["chain", "iteration", "block", "phase", "accepted", "proposed", "rate"]))
    trace_cols = list(store.trace[0]) if store.trace else ["chain", "iteration", "phase"]
    paths.append(_write_csv(out / TRACE_FILE, store.trace, trace_cols))
    paths.append(_write_json(out / MODEL_FILE, {
        "spec": spec.to_dict(), "priors": _jsonable(priors.to_dict()),
        "event_ages": cohort.event_ages(events_only=True).tolist(),
        "n_subjects": cohort.n, "chains": n_chains,
    }))
    inputs = {p.name: _sha256(p) for p in (data_dir / SUBJECTS_FILE, data_dir / LANDMARKS_FILE)}
    paths.append(_update_manifest(out, "fit", {
        "config": sec, "seed": seed, "inputs": inputs,
        "outputs": {p.name: _sha256(p) for p in paths},
        "timing_seconds": {"load": t1 - t0, "sample": t2 - t1,
                           "write": time.perf_counter() - t2},
    }))
    return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _regime(value, K, key):
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value] * K
    if not isinstance(value, list) or len(value) != K:
        raise ConfigError(f"expected 0, 1 or a list of {K} values", key)
    try:
        return Regime(tuple(value))
    except ValueError as exc:
        raise ConfigError(str(exc), key) from None


def cmd_effects(args, cfg) -> list[Path]:
    sec = _section(cfg, "effects")
    draws_dir = Path(args.path or _get(sec, "draws", "str", where="effects"))
    out = Path(args.out or _get(sec, "out", "str", str(draws_dir), "effects"))
    model_path, draws_path = draws_dir / MODEL_FILE, draws_dir / DRAWS_FILE
    for p in (model_path, draws_path):
        if not p.exists():
            raise DataError(f"draw store not found: {p}")
    ages = _get(sec, "ages", "list", where="effects")
    if not ages or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in ages):
        raise ConfigError("expected a nonempty list of ages", "effects.ages")
    C_star = _positive_int(sec, "C_star", 1000, "effects")
    max_intervals = _positive_int(sec, "max_intervals", 4, "effects")
    weighted = _get(sec, "weighted", "bool", False, "effects")
    grids = _get(sec, "grids", "dict", {}, "effects")
    z_cfg = _get(sec, "z", "any", 1, "effects")
    zs_cfg = _get(sec, "z_star", "any", 0, "effects")
    _guard([out / EFFECTS_FILE], args.force)

    t0 = time.perf_counter()
    model = json.loads(model_path.read_text(encoding="utf-8"))
    spec = ModelSpec.from_dict(model["spec"])
    store = PosteriorDrawStore.read_jsonl(draws_path, spec)
    if not len(store):
        raise DataError(f"draw store {draws_path} holds no draws")
    events = np.asarray(model["event_ages"], dtype=float)
    t1 = time.perf_counter()

    estimates, grid_info, failures = [], {}, []
    for age in sorted(float(a) for a in ages):
        key = f"effects.grids.{age:g}"
        try:
            explicit = grids.get(f"{age:g}", grids.get(str(age)))
            if explicit is not None:
                grid = AgeGrid(tuple(float(a) for a in explicit))
                if grid.ages[-1] > age:
                    raise ConfigError("grid extends past its target age", key)
            else:
                grid = build_age_grid(events, age, max_intervals)
            config = GCompConfig(grid, age, _regime(z_cfg, grid.K, "effects.z"),
                                 _regime(zs_cfg, grid.K, "effects.z_star"), C_star, weighted)
        except DataError as exc:
            log.error("age %g: %s", age, exc)
            failures.append(age)
            continue
        estimates.append(estimate_effects(store.states, spec, config, args.seed, args.threads))
        grid_info[f"{age:g}"] = list(grid.ages)
    t2 = time.perf_counter()

    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": args.seed, "C_star": C_star, "grids": grid_info, "weighted": weighted,
            "z": z_cfg, "z_star": zs_cfg, "n_draws": len(store), "failed_ages": failures}
    path = write_effects(estimates, out / EFFECTS_FILE, meta)
    paths = [path, path.with_suffix(".json")]
    paths.append(_update_manifest(out, "effects", {
        "config": sec, "seed": args.seed,
        "inputs": {draws_path.name: _sha256(draws_path), model_path.name: _sha256(model_path)},
        "outputs": {p.name: _sha256(p) for p in paths},
        "timing_seconds": {"load": t1 - t0, "gcomp": t2 - t1},
    }))
    if failures:
        for p in paths:
            print(p)
        raise DataError(f"grid infeasible for age(s) {', '.join(f'{a:g}' for a in failures)}; "
                        "other ages were written")
    return paths


def cmd_report(args, cfg) -> list[Path]:
    sec = _section(cfg, "report")
    run_dir = Path(args.path or _get(sec, "dir", "str", where="report"))
    effects = run_dir / EFFECTS_FILE
    if not effects.exists():
        raise DataError(f"effects table not found: {effects}")
    fit_dir = Path(_get(sec, "fit_dir", "str", str(run_dir), "report"))
    out = Path(args.out) if args.out else run_dir
    _guard([out / REPORT_FILE], args.force)
    out.mkdir(parents=True, exist_ok=True)
    return [write_report(effects, out / REPORT_FILE, fit_dir / TRACE_FILE,
                         fit_dir / ACCEPTANCE_FILE)]


# -------------------------------------------------------------------- main

def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copies must not reset values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None),
                        help="JSON config file with per-subcommand sections")
    common.add_argument("--seed", type=int, default=d(None),
                        help="random seed (default: config or 0)")
    common.add_argument("--threads", type=int, default=d(None), help="worker thread cap")
    common.add_argument("--out", default=d(None), help="output directory")
    common.add_argument("--force", action="store_true", default=d(False),
                        help="overwrite existing artifacts")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="edpmed", parents=[_common_flags(False)],
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"edpmed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a cohort from a known model")
    p = sub.add_parser("fit", parents=[common], help="run the Gibbs sampler")
    p.add_argument("path", nargs="?", help="directory with subjects.csv and landmarks.csv")
    p = sub.add_parser("effects", parents=[common], help="G-computation of IDE, IIE and TE")
    p.add_argument("path", nargs="?", help="directory written by 'fit'")
    p = sub.add_parser("report", parents=[common], help="static HTML report")
    p.add_argument("path", nargs="?", help="directory holding effects.csv")
    sub.choices["simulate"].set_defaults(path=None)
    return parser


_COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "effects": cmd_effects,
             "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="edpmed: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = _get(cfg, "seed", "int", 0)
        if args.threads is None:
            args.threads = _get(cfg, "threads", "int", 1)
        if args.threads < 1:
            raise ConfigError("must be >= 1", "threads")
        paths = _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"edpmed {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"edpmed {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"edpmed {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
