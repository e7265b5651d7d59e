"""Command-line front end for the Monte Carlo comparisons.

    dckf run falling-body --mc-runs 10 --seed 42 --output-dir out
    dckf run my_scenario.json --format json
    dckf list-scenarios
    dckf validate-config my_scenario.json
    dckf version
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DckfError
from .harness import ScenarioConfig, run_scenario, summarize
from .models import get_model
from .scenarios import BUILTIN_SCENARIOS, builtin_scenarios

SEED_ENV = "DESENS_CKF_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
FLOAT_FMT = ".17g"

log = logging.getLogger("dckf")


def load_scenario(ref):
    """A built-in scenario by name, or a JSON scenario file by path."""
    if ref in BUILTIN_SCENARIOS:
        return builtin_scenarios()[ref]
    path = Path(ref)
    if not path.is_file():
        raise ConfigError(f"scenario: {ref!r} is neither a built-in ({', '.join(BUILTIN_SCENARIOS)}) nor a file")
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"scenario: cannot read {ref}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("scenario: top level must be a JSON object")
    return ScenarioConfig.from_dict(data)


_SCALAR_TYPES = {"int": int, "float": float, "str": str}


def apply_override(cfg, key, raw):
    """Set one ``key=value`` override, parsed and type-checked against the schema."""
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    if key not in types:
        raise ConfigError(f"{key}: unknown configuration key")
    kind = types[key] if isinstance(types[key], str) else types[key].__name__
    try:
        if kind in _SCALAR_TYPES:
            value = _SCALAR_TYPES[kind](raw)
        else:
            value = json.loads(raw)
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    if kind == "int" and isinstance(value, int) and str(value) != raw.strip().lstrip("+"):
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    expected = {"list": list, "dict": dict}.get(kind)
    if expected is not None and not isinstance(value, expected):
        raise ConfigError(f"{key}: expected a JSON {kind}, got {raw!r}")
    setattr(cfg, key, value)


def resolve_config(args):
    cfg = load_scenario(args.scenario)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set: expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply_override(cfg, key.strip(), raw.strip())
    if getattr(args, "mc_runs", None) is not None:
        cfg.mc_runs = args.mc_runs
    if getattr(args, "dt", None) is not None:
        cfg.dt = args.dt
    if getattr(args, "weights_scale", None) is not None:
        if not np.isfinite(args.weights_scale) or args.weights_scale < 0:
            raise ConfigError(f"weights_scale: must be non-negative, got {args.weights_scale}")
        cfg.weights = (args.weights_scale * np.asarray(cfg.weights, float)).tolist()
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"rng_seed: {SEED_ENV}={os.environ[SEED_ENV]!r} is not an integer") from None
    if seed is not None:
        cfg.rng_seed = seed
    return cfg.validate()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), FLOAT_FMT)


def write_table(path, columns, rows, fmt):
    """Write a table as RFC-4180 CSV or as JSON ``{"columns", "rows"}``."""
    if fmt == "csv":
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    else:
        data = {"columns": list(columns), "rows": [[_json_value(v) for v in row] for row in rows]}
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump(data, fh, indent=1, allow_nan=True)
            fh.write("\n")


def _json_value(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def _series(times, values):
    return [[k + 1, t, *vals] for k, (t, vals) in enumerate(zip(times, values))]


def write_artifacts(artifacts, out_dir, fmt):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = artifacts.scenario
    labels = list(get_model(cfg.model).labels())
    ell = len(cfg.c_ref)
    times = artifacts.times
    head = ["step", "time_s"]

    rows = summarize(artifacts)
    write_table(out / "summary", ["filter", "component", "metric", "value"],
                [[r["filter"], r["component"], r["metric"], r["value"]] for r in rows], fmt)
    for name, fa in artifacts.filters.items():
        write_table(out / f"rmse_{name}", head + labels, _series(times, fa.rmse), fmt)
        sens_cols = [f"{lab}_c{i + 1}" for i in range(ell) for lab in labels]
        write_table(out / f"sensitivity_{name}", head + sens_cols,
                    _series(times, fa.mean_abs_sens.reshape(len(times), -1)), fmt)
        write_table(out / f"cost_{name}", head + ["cost"], _series(times, fa.mean_cost[:, None]), fmt)
        write_table(out / f"nme_{name}", head + labels, _series(times, fa.nme), fmt)
        write_table(out / f"gain_{name}", head + ["gain_norm"], _series(times, fa.mean_gain_norm[:, None]), fmt)
    with open(out / "metadata.json", "w") as fh:
        json.dump(artifacts.metadata, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_run(args):
    cfg = resolve_config(args)
    artifacts = run_scenario(cfg, jobs=args.jobs)
    write_artifacts(artifacts, args.output_dir, args.format)
    print(f"wrote {cfg.name} results ({cfg.mc_runs} runs, seed {cfg.rng_seed}) to {args.output_dir}")
    return EXIT_OK


def cmd_list(args):
    for name in BUILTIN_SCENARIOS:
        print(name)
    return EXIT_OK


def cmd_validate(args):
    cfg = resolve_config(args)
    print(f"{args.scenario}: ok ({cfg.model}, {cfg.steps} steps, {cfg.mc_runs} runs)")
    return EXIT_OK


def cmd_version(args):
    print(__version__)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dckf", description="Cubature Kalman filter desensitization experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log dropped runs and progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo comparison")
    run.add_argument("scenario", help="built-in scenario name or JSON config path")
    run.add_argument("--mc-runs", type=int)
    run.add_argument("--seed", type=int, help=f"RNG seed (falls back to ${SEED_ENV}, then the scenario)")
    run.add_argument("--dt", type=float)
    run.add_argument("--weights-scale", type=float, help="multiply every sensitivity weight")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    run.add_argument("--output-dir", default="results")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(func=cmd_run)

    ls = sub.add_parser("list-scenarios", help="print the built-in scenario names")
    ls.set_defaults(func=cmd_list)

    val = sub.add_parser("validate-config", help="check a scenario without running it")
    val.add_argument("scenario")
    val.add_argument("--set", action="append", metavar="KEY=VALUE")
    val.set_defaults(func=cmd_validate)

    ver = sub.add_parser("version")
    ver.set_defaults(func=cmd_version)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: jobs: must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DckfError as exc:
        print(f"filter error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
