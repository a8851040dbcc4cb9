"""Command-line interface: ``icegcomp simulate|estimate|bench``.

Exit codes
----------
0  success
1  runtime failure
2  configuration error
3  data validation or parse error
4  estimation did not converge (the result file is still written)
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import jsonschema
import yaml

from .bootstrap import BootstrapConfig, TooManyFailures, bootstrap_estimate
from .data import ParseError, TreatmentPlan, ValidationError, load_csv
from .design import DesignSpec, MissingColumn
from .ice import DimensionMismatch, EventNonMonotone, IceConfig, estimate, estimate_contrast
from .mest import SolveConfig
from .simulation import ScenarioConfig, metrics_csv, metrics_json, run_study

log = logging.getLogger("icegcomp")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3, 4
SMALL_B = 100

_PLAN = {"oneOf": [{"enum": ["always", "never", "natural_course"]},
                   {"type": "array", "items": {"enum": [0, 1]}, "minItems": 1}]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "out": {"type": "string"},
        "format": {"enum": ["csv", "json"]},
        "workers": {"type": "integer", "minimum": 1},
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n"],
            "properties": {
                "n": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "estimators": {"type": "array", "items": {"enum": ["unstratified", "stratified"]},
                               "minItems": 1},
                "plans": {"type": "array", "items": {"enum": ["always", "never"]}, "minItems": 1},
                "iterations": {"type": "integer", "minimum": 1},
                "truth_sample": {"type": "integer", "minimum": 1},
            },
        },
        "estimate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["data", "plan", "design"],
            "properties": {
                "data": {"type": "string"},
                "schema": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "tau": {"type": "integer", "minimum": 1},
                        "id": {"type": "string"},
                        "columns": {"type": "object", "additionalProperties": {"type": "string"}},
                    },
                },
                "plan": _PLAN,
                "contrast": _PLAN,
                "estimator": {"enum": ["unstratified", "stratified"]},
                "outcome": {"enum": ["repeated_measures", "time_to_event"]},
                "design": {"type": "array", "minItems": 1,
                           "items": {"type": "array", "minItems": 1, "items": {"type": "string"}}},
                "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_iterations": {"type": "integer", "minimum": 1},
                "root_tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "bootstrap": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "resamples": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer"},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
    },
}

SIMULATE_DEFAULTS = {"estimators": ["unstratified", "stratified"], "plans": ["always", "never"],
                     "iterations": 100, "truth_sample": 1_000_000}
ESTIMATE_DEFAULTS = {"schema": {}, "contrast": None, "estimator": "unstratified",
                     "outcome": "repeated_measures", "level": 0.95, "max_iterations": 10000,
                     "root_tolerance": 1e-9}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return cfg


def resolve_config(cfg: dict, args, command: str) -> dict:
    """Apply flag overrides and defaults, then validate against the schema."""
    cfg = json.loads(json.dumps(cfg))
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    for key in ("seed", "out", "format", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if command == "simulate":
        section = cfg.setdefault("simulate", {"n": [250, 500, 1000, 2000, 5000]})
        if args.iterations is not None:
            section["iterations"] = args.iterations
    elif command == "bench":
        cfg.setdefault("bootstrap", {})
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    cfg.setdefault("seed", 0)
    cfg.setdefault("format", "csv" if command == "simulate" else "json")
    cfg.setdefault("workers", (os.cpu_count() or 1) if command in ("simulate", "bench") else 1)
    if command == "simulate":
        cfg["simulate"] = {**SIMULATE_DEFAULTS, **cfg["simulate"]}
        cfg.setdefault("out", "simulation.csv" if cfg["format"] == "csv" else "simulation.json")
    else:
        if "estimate" not in cfg:
            raise ConfigError(f"{command} needs an 'estimate' section")
        cfg["estimate"] = {**ESTIMATE_DEFAULTS, **cfg["estimate"]}
        cfg.setdefault("out", f"{command}.json")
    if command == "bench":
        boot = {"resamples": 500, "seed": cfg["seed"], "workers": cfg["workers"]}
        cfg["bootstrap"] = {**boot, **cfg["bootstrap"]}
    return cfg


def _write(path, text):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_simulate(cfg: dict) -> int:
    sim = cfg["simulate"]
    rows = []
    for n in sim["n"]:
        for estimator in sim["estimators"]:
            for plan in sim["plans"]:
                scenario = ScenarioConfig(n=n, iterations=sim["iterations"], plan=plan,
                                          estimator=estimator, seed=cfg["seed"],
                                          truth_sample=sim["truth_sample"])
                t0 = time.perf_counter()
                rows.append(run_study(scenario, workers=cfg["workers"]))
                log.info("n=%d %s %s done in %.1fs", n, estimator, plan, time.perf_counter() - t0)
    meta = {"config": cfg, "seed": cfg["seed"]}
    if cfg["format"] == "json":
        _write(cfg["out"], metrics_json(rows, meta))
    else:
        _write(cfg["out"], metrics_csv(rows))
        _write(str(cfg["out"]) + ".run.json", json.dumps(meta, indent=2) + "\n")
    return EXIT_OK


def _estimation_inputs(cfg):
    est = cfg["estimate"]
    try:
        design = DesignSpec(est["design"])
        plan = TreatmentPlan.parse(est["plan"])
        contrast = TreatmentPlan.parse(est["contrast"]) if est["contrast"] is not None else None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dataset = load_csv(est["data"], est["schema"])
    try:
        design = design.resolve(dataset)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    config = IceConfig(design=design, stratified=est["estimator"] == "stratified",
                       outcome_kind=est["outcome"])
    solve = SolveConfig(max_iterations=est["max_iterations"], root_tolerance=est["root_tolerance"])
    return dataset, plan, contrast, config, solve


def _contrast_config(config, contrast):
    # natural-course stratification is vacuous; that arm is always unstratified
    if contrast is not None and contrast.is_natural_course and config.stratified:
        from dataclasses import replace
        return replace(config, stratified=False)
    return config


def _sandwich(dataset, plan, contrast, config, solve, level):
    if contrast is None:
        res = estimate(dataset, plan, config, solve, level, check=False)
        return res, res.to_record()
    res = estimate_contrast(dataset, plan, contrast, config, _contrast_config(config, contrast),
                            solve, level, check=False)
    return res, res.to_record()


def cmd_estimate(cfg: dict) -> int:
    dataset, plan, contrast, config, solve = _estimation_inputs(cfg)
    result, record = _sandwich(dataset, plan, contrast, config, solve, cfg["estimate"]["level"])
    payload = {"config": cfg, "seed": cfg["seed"], "n": dataset.n, "tau": dataset.tau, "result": record}
    _write(cfg["out"], json.dumps(payload, indent=2) + "\n")
    if not result.converged:
        log.error("estimation failed: %s", result.failure)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    dataset, plan, contrast, config, solve = _estimation_inputs(cfg)
    level = cfg["estimate"]["level"]
    t0 = time.perf_counter()
    result, record = _sandwich(dataset, plan, contrast, config, solve, level)
    sandwich_time = time.perf_counter() - t0
    if not result.converged:
        payload = {"config": cfg, "seed": cfg["seed"], "sandwich": record}
        _write(cfg["out"], json.dumps(payload, indent=2) + "\n")
        log.error("estimation failed: %s", result.failure)
        return EXIT_CONVERGENCE
    if contrast is None:
        est, se, ci = result.mu_hat, result.se, result.ci
    else:
        est, se, ci = result.mu_d, result.se["mu_d"], result.ci["mu_d"]
    rows = [{"method": "sandwich", "estimate": est, "se": se, "ci": list(ci), "resamples": None,
             "failures": 0, "wall_time_seconds": sandwich_time, "workers": 1}]
    boot = cfg["bootstrap"]
    runs = [("bootstrap_sequential", 1)]
    if boot["workers"] > 1:
        runs.append(("bootstrap_parallel", boot["workers"]))
    for method, workers in runs:
        bc = BootstrapConfig(resamples=boot["resamples"], seed=boot["seed"], workers=workers)
        res = bootstrap_estimate(dataset, plan, config, bc, level, contrast_plan=contrast,
                                 contrast_config=_contrast_config(config, contrast))
        rows.append(res.to_record(method))
        log.info("%s: %.2fs", method, res.wall_time)
    payload = {"config": cfg, "seed": cfg["seed"], "n": dataset.n,
               "small_b_warning": boot["resamples"] < SMALL_B, "results": rows}
    _write(cfg["out"], json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icegcomp",
                                     description="ICE g-computation with sandwich variance")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("simulate", "run the simulation study"),
                            ("estimate", "estimate a plan mean from a CSV"),
                            ("bench", "compare sandwich and bootstrap inference")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file")
        p.add_argument("--format", choices=["csv", "json"])
        p.add_argument("--workers", type=int)
        p.add_argument("--iterations", type=int, help="simulation iterations per scenario")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(load_config(args.config), args, args.command)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ValidationError, ParseError, EventNonMonotone) as exc:
        log.error("invalid data: %s", exc)
        return EXIT_DATA
    except (DimensionMismatch, MissingColumn) as exc:
        log.error("config does not match the data: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc)
        return EXIT_CONFIG
    except TooManyFailures as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
