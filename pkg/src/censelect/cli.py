"""Command-line interface.

Every command that writes a file also writes ``<out>.manifest.json``
holding the fully resolved configuration, its SHA-256, the seed and the
library versions. Passing a manifest back through ``--config`` reruns the
command and reproduces the output byte for byte, whatever ``--jobs`` is.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cox import fit_cox, standardized_curves
from .errors import CenselectError, ConfigError
from .io import read_dataset, write_dataset
from .selection import (decorrelated_score_test, double_selection, post_lasso,
                        significance_selection_single)
from .simulation import (CurveSpec, DgpConfig, Type1Spec, curve_experiment,
                         score_bias_oracle, simulate, type1_experiment)
from .survival import logrank_test

log = logging.getLogger("censelect")

ANALYZE_METHODS = ("double", "post_lasso", "logrank", "decorrelated", "significance_single")


# -- configuration --------------------------------------------------------


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return raw


def load_config(path, command: str) -> dict:
    """Read a config file, unwrapping it if it is a manifest."""
    if path is None:
        return {}
    raw = _load_json(path)
    if "config_sha256" in raw:
        if raw.get("command") != command:
            raise ConfigError(f"manifest was written by '{raw.get('command')}', not '{command}'")
        return raw["config"]
    return raw


def _pop(cfg: dict, key, default, kind):
    value = cfg.pop(key, default)
    try:
        return kind(value) if value is not None else None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _reject_unknown(cfg: dict, where: str):
    if cfg:
        raise ConfigError(f"unknown {where} field(s): {', '.join(sorted(cfg))}")


def _dgp(raw) -> DgpConfig:
    if not isinstance(raw, dict):
        raise ConfigError("dgp must be a JSON object")
    return DgpConfig.from_dict(raw)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest(command: str, config: dict, seed) -> dict:
    import numba
    import scipy
    return {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(canonical(config).encode()).hexdigest(),
        "seed": seed,
        "versions": {"censelect": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__},
    }


def _write_json(obj, path):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _write_manifest(out, command, config, seed):
    if out is not None:
        _write_json(manifest(command, config, seed), f"{out}.manifest.json")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [_jsonable(v) for v in items]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def _write_records(rows: list[dict], path):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -- commands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = dict(load_config(args.config, "simulate"))
    raw = dict(cfg.pop("dgp", {}))
    _reject_unknown(cfg, "simulate config")
    if args.seed is not None:
        raw["seed"] = args.seed
    config = _dgp(raw)
    resolved = {"dgp": config.to_dict()}
    data = simulate(config)
    if args.out is None:
        raise ConfigError("simulate needs --out")
    write_dataset(data, args.out)
    _write_manifest(args.out, "simulate", resolved, config.seed)
    log.info("wrote %d rows to %s", data.n, args.out)
    return 0


def _coefficient_table(fit):
    se_robust = np.sqrt(np.diag(fit.robust_variance))
    se_model = np.sqrt(np.diag(fit.model_variance))
    rows = []
    for name, coef, sr, sm in zip(fit.names, fit.coefficients, se_robust, se_model):
        z = coef / sr if sr > 0 else math.nan
        rows.append({"name": name, "coef": float(coef), "robust_se": float(sr),
                     "model_se": float(sm), "z": float(z),
                     "p_value": float(2 * _norm_sf(abs(z))) if math.isfinite(z) else None})
    return rows


def _norm_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2))


def _test_dict(test):
    return {"method": test.method, "statistic": test.statistic, "score": test.score,
            "variance": test.variance, "p_value": test.p_value,
            "adjustment_set": list(test.adjustment_set)}


def cmd_analyze(args) -> int:
    cfg = dict(load_config(args.config, "analyze"))
    cfg.pop("data_sha256", None)
    data_path = args.data or cfg.pop("data", None)
    cfg.pop("data", None)
    opts = {"method": "double", "lambda_rule": "1se", "folds": 20, "seed": 0,
            "forced_in": [], "times": []}
    for key in opts:
        if key in cfg:
            opts[key] = cfg.pop(key)
    flags = {"method": args.method, "lambda_rule": args.lambda_rule, "folds": args.folds,
             "seed": args.seed,
             "forced_in": None if args.forced_in is None else args.forced_in.split(","),
             "times": None if args.times is None else args.times.split(",")}
    opts.update({k: v for k, v in flags.items() if v is not None})
    if data_path is None:
        raise ConfigError("analyze needs a data file")
    method, rule = opts["method"], opts["lambda_rule"]
    try:
        folds, seed = int(opts["folds"]), int(opts["seed"])
        forced = tuple(str(name).strip() for name in opts["forced_in"] if str(name).strip())
        times = [float(t) for t in opts["times"] if str(t).strip()]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad analyze option: {exc}") from exc
    _reject_unknown(cfg, "analyze config")
    if method not in ANALYZE_METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {ANALYZE_METHODS}")
    if rule not in ("min", "1se"):
        raise ConfigError("lambda_rule must be 'min' or '1se'")
    if any(t < 0 for t in times):
        raise ConfigError("times must be nonnegative")

    data = read_dataset(data_path)
    digest = hashlib.sha256(Path(data_path).read_bytes()).hexdigest()
    report = {"method": method, "n": data.n, "events": data.n_events,
              "covariates": list(data.covariate_names)}
    fit = None
    if method in ("double", "post_lasso"):
        if method == "double":
            sel = double_selection(data, rule, folds, seed, forced)
        else:
            sel = post_lasso(data, rule, folds, seed, forced)
        fit, test = sel.fit, sel.test
        report.update({"lambda_rule": rule, "lambda_survival": sel.lambda_survival,
                       "lambda_censoring": sel.lambda_censoring,
                       "survival_support": sorted(sel.survival_support),
                       "censoring_support": sorted(sel.censoring_support),
                       "final_adjustment_set": list(sel.final_adjustment_set)})
    elif method == "logrank":
        test = logrank_test(data)
        fit = fit_cox(data, (), include_treatment=True)
    elif method == "decorrelated":
        test = decorrelated_score_test(data, rule, folds, seed)
    else:
        test = significance_selection_single(data)
        fit = fit_cox(data, test.adjustment_set, include_treatment=True)
    report["treatment_test"] = _test_dict(test)
    if fit is not None:
        report["coefficients"] = _coefficient_table(fit)
        if times:
            report["curves"] = [
                {"treatment": arm, "time": t, "survival": float(s)}
                for arm in (0, 1)
                for t, s in zip(times, standardized_curves(fit, data, arm, times).probabilities)
            ]
    resolved = {"data": str(data_path), "data_sha256": digest, "method": method,
                "lambda_rule": rule, "folds": folds, "seed": seed, "forced_in": list(forced),
                "times": times}
    _write_json(report, args.out)
    _write_manifest(args.out, "analyze", resolved, seed)
    return 0


def _type1_spec(cfg: dict, seed) -> tuple[Type1Spec, dict]:
    cfg = dict(cfg)
    base = _dgp(cfg.pop("base", {}))
    axes = cfg.pop("axes", {"b": [0.0, 1.0], "g": [0.0, 1.0]})
    if not isinstance(axes, dict):
        raise ConfigError("axes must map field names to value lists")
    kwargs = {}
    for key, kind in (("methods", tuple), ("replicates", int), ("base_seed", int),
                      ("level", float), ("folds", int), ("alpha_select", float),
                      ("single_variance", str), ("single_test", str)):
        if key in cfg:
            kwargs[key] = _pop(cfg, key, None, kind)
    _reject_unknown(cfg, "type1 config")
    if seed is not None:
        kwargs["base_seed"] = seed
    try:
        spec = Type1Spec(base, {k: list(v) for k, v in axes.items()}, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    resolved = {"base": base.to_dict(), "axes": {k: list(v) for k, v in spec.axes.items()},
                "methods": list(spec.methods), "replicates": spec.replicates,
                "base_seed": spec.base_seed, "level": spec.level, "folds": spec.folds,
                "alpha_select": spec.alpha_select, "single_variance": spec.single_variance,
                "single_test": spec.single_test}
    return spec, resolved


def cmd_type1(args) -> int:
    spec, resolved = _type1_spec(load_config(args.config, "type1"), args.seed)
    grid = type1_experiment(spec, jobs=args.jobs)
    _write_records(grid.records(), args.out)
    _write_manifest(args.out, "type1", resolved, spec.base_seed)
    return 0


def cmd_bias_oracle(args) -> int:
    cfg = dict(load_config(args.config, "bias-oracle"))
    params = {}
    for key, default, kind in (("beta", 0.0, float), ("gamma1", 1.0, float),
                               ("gamma2", 1.0, float), ("beta0", 1.0, float),
                               ("gamma0", -1.0, float), ("mc_draws", 100_000, int),
                               ("t_max", None, float), ("t_steps", 2000, int),
                               ("seed", 0, int)):
        flag = getattr(args, key, None)
        value = _pop(cfg, key, default, kind)
        params[key] = kind(flag) if flag is not None else value
    _reject_unknown(cfg, "bias-oracle config")
    result = score_bias_oracle(**params)
    _write_json({"estimate": result.estimate, "mc_se": result.mc_se, **params}, args.out)
    _write_manifest(args.out, "bias-oracle", params, params["seed"])
    return 0


def cmd_curves(args) -> int:
    cfg = dict(load_config(args.config, "curves"))
    dgp = _dgp(cfg.pop("dgp", {"b": 0.8, "g": 1.6, "gamma1": 2.0}))
    kwargs = {}
    for key, kind in (("replicates", int), ("timepoints", tuple), ("methods", tuple),
                      ("lambda_rule", str), ("folds", int), ("base_seed", int),
                      ("truth_draws", int)):
        if key in cfg:
            kwargs[key] = _pop(cfg, key, None, kind)
    _reject_unknown(cfg, "curves config")
    if args.seed is not None:
        kwargs["base_seed"] = args.seed
    spec = CurveSpec(dgp, **kwargs)
    table = curve_experiment(spec, jobs=args.jobs)
    resolved = {"dgp": dgp.to_dict(), "replicates": spec.replicates,
                "timepoints": list(spec.timepoints), "methods": list(spec.methods),
                "lambda_rule": spec.lambda_rule, "folds": spec.folds,
                "base_seed": spec.base_seed, "truth_draws": spec.truth_draws}
    _write_records(table.records(), args.out)
    _write_manifest(args.out, "curves", resolved, spec.base_seed)
    return 0


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or a manifest from an earlier run")
    common.add_argument("--seed", type=int, help="override the seed in the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--out", help="output path (stdout when omitted, where allowed)")

    parser = argparse.ArgumentParser(prog="censelect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a simulated trial as CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="test the treatment effect in a CSV")
    p.add_argument("data", nargs="?", help="dataset CSV")
    p.add_argument("--method", choices=ANALYZE_METHODS)
    p.add_argument("--lambda-rule", choices=("min", "1se"))
    p.add_argument("--folds", type=int)
    p.add_argument("--forced-in", help="comma-separated covariates always adjusted for")
    p.add_argument("--times", help="comma-separated times for standardized curves")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("type1", parents=[common], help="type I error grid (long CSV)")
    p.set_defaults(func=cmd_type1)

    p = sub.add_parser("bias-oracle", parents=[common],
                       help="Monte Carlo value of the unadjusted score bias")
    for name in ("beta", "gamma1", "gamma2", "beta0", "gamma0", "t-max"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--mc-draws", type=int)
    p.add_argument("--t-steps", type=int)
    p.set_defaults(func=cmd_bias_oracle)

    p = sub.add_parser("curves", parents=[common], help="KM vs standardized curves (long CSV)")
    p.set_defaults(func=cmd_curves)
    return parser


def _setup_logging():
    level = os.environ.get("CENSELECT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("censelect: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CenselectError as exc:
        print(f"censelect: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"censelect: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
