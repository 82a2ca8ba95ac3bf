"""Command-line entry point.

Subcommands: ``simulate``, ``fit``, ``coverage`` and ``check``. A JSON file
passed with ``--config`` supplies defaults for any flag (keys use the flag
names with underscores); flags given on the command line take precedence.

Exit codes: 0 success, 2 configuration error, 3 input parse error,
4 partial failures (recorded in the outputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .diagnostics import wishart_coverage
from .errors import ContractError, DomainError, EstimationError, InputParseError
from .harness import (
    ALL_MODIFIERS,
    LOSSES,
    STUDY_GRID,
    ExperimentConfig,
    fit_file,
    run_checks,
    run_experiment,
    write_json,
)
from .solvers import METHODS, SolverConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_PARTIAL = 4

log = logging.getLogger("constrained_mvn")


class ConfigError(Exception):
    pass


def parse_grid(text) -> tuple[tuple[int, int], ...]:
    """``"50x5,100x10"`` or a list of pairs into ``((50, 5), (100, 10))``."""
    if isinstance(text, (list, tuple)):
        try:
            return tuple((int(n), int(p)) for n, p in text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid {text!r}") from exc
    out = []
    for item in str(text).split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            n, p = item.split("x")
            out.append((int(n), int(p)))
        except ValueError:
            raise ConfigError(f"bad grid entry {item!r}; expected NxP") from None
    if not out:
        raise ConfigError("grid is empty")
    return tuple(out)


def _split_list(value) -> tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


def _defaults() -> dict:
    return {
        "simulate": {
            "grid": ",".join(f"{n}x{p}" for n, p in STUDY_GRID),
            "reps": 100,
            "methods": "SMLE,SC,AS",
            "modifiers": "none,M3-kmeans",
            "losses": ",".join(LOSSES),
            "seed": 0,
            "workers": 1,
            "out_dir": "results",
            "fixed_truth": False,
            "max_iter": 1000,
            "tol": 1e-6,
        },
        "fit": {
            "input": None,
            "method": "AS",
            "modifier": "none",
            "max_iter": 1000,
            "tol": 1e-6,
            "out": "fit.json",
        },
        "coverage": {"n": 50, "p": 5, "reps": 2000, "seed": 0, "shards": 1},
        "check": {"trials": 200, "seed": 0},
    }


def build_parser() -> argparse.ArgumentParser:
    # every option defaults to None so that file values can fill the gaps
    parser = argparse.ArgumentParser(prog="constrained-mvn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with default option values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the seeded risk study")
    sim.add_argument("--grid", help='comma-separated NxP pairs, e.g. "50x5,100x10"')
    sim.add_argument("--reps", type=int)
    sim.add_argument("--methods", help=f"comma-separated subset of {sorted(METHODS)}")
    sim.add_argument("--modifiers", help=f"comma-separated subset of {list(ALL_MODIFIERS)}")
    sim.add_argument("--losses", help=f"comma-separated subset of {list(LOSSES)}")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--out-dir", dest="out_dir")
    sim.add_argument("--fixed-truth", dest="fixed_truth", action="store_const", const=True)
    sim.add_argument("--max-iter", dest="max_iter", type=int)
    sim.add_argument("--tol", type=float)

    fit = sub.add_parser("fit", help="fit a CSV data file")
    fit.add_argument("--input")
    fit.add_argument("--method", help=f"one of {sorted(METHODS)}")
    fit.add_argument("--modifier", help=f"one of {list(ALL_MODIFIERS)}")
    fit.add_argument("--max-iter", dest="max_iter", type=int)
    fit.add_argument("--tol", type=float)
    fit.add_argument("--out")

    cov = sub.add_parser("coverage", help="Wishart smallest-eigenvalue coverage")
    cov.add_argument("--n", type=int)
    cov.add_argument("--p", type=int)
    cov.add_argument("--reps", type=int)
    cov.add_argument("--seed", type=int)
    cov.add_argument("--shards", type=int)

    chk = sub.add_parser("check", help="run library invariants on random instances")
    chk.add_argument("--trials", type=int)
    chk.add_argument("--seed", type=int)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags, in that order."""
    opts = dict(_defaults()[args.command])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        section = doc.get(args.command, doc)
        unknown = sorted(k for k in section if k not in opts and k not in _defaults())
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        opts.update({k: v for k, v in section.items() if k in opts})
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _solver_config(opts: dict, keep_trace: bool) -> SolverConfig:
    return SolverConfig(max_iter=int(opts["max_iter"]), tol=float(opts["tol"]), keep_trace=keep_trace)


def cmd_simulate(opts: dict) -> int:
    config = ExperimentConfig(
        grid=parse_grid(opts["grid"]),
        reps=int(opts["reps"]),
        methods=tuple(m.upper() for m in _split_list(opts["methods"])),
        modifiers=_split_list(opts["modifiers"]),
        losses=_split_list(opts["losses"]),
        seed=int(opts["seed"]),
        solver=_solver_config(opts, keep_trace=False),
        workers=int(opts["workers"]),
        fixed_truth=bool(opts["fixed_truth"]),
    )
    table = run_experiment(config)
    paths = table.write(opts["out_dir"])
    for name, path in paths.items():
        log.info("wrote %s", path)
    sys.stdout.write(table.to_csv())
    bad_mods = sum(
        1 for rec in table.runs for out in rec.get("outputs", {}).values() if not out["ok"]
    )
    if table.failures or bad_mods:
        log.warning("%d failed runs and %d failed modifier calls; see runs.jsonl", table.failures, bad_mods)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_fit(opts: dict) -> int:
    if not opts["input"]:
        raise ConfigError("fit needs --input")
    method = str(opts["method"]).upper()
    if method not in METHODS:
        raise ConfigError(f"unknown method {opts['method']!r}; choose from {sorted(METHODS)}")
    doc = fit_file(opts["input"], method, opts["modifier"], _solver_config(opts, keep_trace=False))
    write_json(doc, opts["out"])
    log.info("wrote %s", opts["out"])
    solver = doc["solver"]
    print(json.dumps({"status": doc["status"], "mean": solver["mean"], "iterations": solver["iterations_used"]}))
    return EXIT_PARTIAL if doc["status"] != "ok" else EXIT_OK


def cmd_coverage(opts: dict) -> int:
    est = wishart_coverage(int(opts["n"]), int(opts["p"]), int(opts["reps"]), int(opts["seed"]), int(opts["shards"]))
    print(json.dumps(est.as_dict()))
    return EXIT_OK


def cmd_check(opts: dict) -> int:
    results = run_checks(int(opts["trials"]), int(opts["seed"]))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.failures}/{r.trials} failures, worst {r.worst:.3g}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_PARTIAL


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "coverage": cmd_coverage, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except InputParseError as exc:
        log.error("input parse error: %s", exc)
        return EXIT_PARSE
    except DomainError as exc:
        # raised for unusable data such as n <= p
        log.error("input error: %s", exc)
        return EXIT_PARSE if args.command == "fit" else EXIT_CONFIG
    except (ConfigError, ContractError, ValueError, TypeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except EstimationError as exc:
        log.error("estimation failed: %s", exc)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
