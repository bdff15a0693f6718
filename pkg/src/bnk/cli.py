"""Command-line interface.

`bnk run` executes one experiment configuration and writes CSV metrics plus
figures; `bnk check` runs the library invariant suite. All run flags can
also be given in a TOML config file, with command-line flags taking
precedence.
"""

import argparse
import sys

import tomli

from .exceptions import NonPSDCavity, NotPSD, ParseError
from .experiments import (
    BACKENDS,
    EXPERIMENT_DEFAULTS,
    EXPERIMENTS,
    ExperimentConfig,
    run_experiment,
)
from .rules import RULES

_RUN_KEYS = (
    "experiment",
    "rule",
    "rho",
    "alpha",
    "xi",
    "backend",
    "seed",
    "folds",
    "iters",
    "out",
    "inducing",
    "data",
)


def build_parser():
    parser = argparse.ArgumentParser(prog="bnk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment configuration")
    run.add_argument("--experiment", choices=EXPERIMENTS)
    run.add_argument("--rule", choices=RULES)
    run.add_argument("--rho", type=float, help="site learning rate in (0, 1]")
    run.add_argument("--alpha", type=float, help="EP power in (0, 1]")
    run.add_argument("--xi", type=float, help="quasi-Newton damping factor in (0, 1)")
    run.add_argument("--backend", choices=BACKENDS)
    run.add_argument("--folds", type=int)
    run.add_argument("--iters", type=int, help="maximum sweeps per fold")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory for CSVs and figures")
    run.add_argument("--inducing", type=int, help="inducing points for the sparse backend")
    run.add_argument("--data", help="CSV path (custom experiment, or motorcycle override)")
    run.add_argument("--config", help="TOML file mirroring these flags")
    run.add_argument("--no-plots", action="store_true", help="skip figure rendering")

    sub.add_parser("check", help="run the library invariant suite")
    return parser


def _resolve_run_config(args):
    file_values = {}
    if args.config:
        with open(args.config, "rb") as fh:
            file_values = tomli.load(fh)
        unknown = set(file_values) - set(_RUN_KEYS) - {"plots"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = {}
    for key in _RUN_KEYS:
        flag = getattr(args, key, None)
        merged[key] = flag if flag is not None else file_values.get(key)
    if merged["experiment"] is None:
        raise ValueError("an experiment must be selected (flag or config file)")
    if merged["rule"] is None:
        raise ValueError("a rule must be selected (flag or config file)")
    defaults = EXPERIMENT_DEFAULTS[merged["experiment"]]
    if merged["rho"] is None:
        merged["rho"] = defaults["rho"]
    if merged["xi"] is None:
        merged["xi"] = defaults["xi"]
    if merged["backend"] is None:
        merged["backend"] = defaults["backend"]
    if merged["iters"] is None:
        merged["iters"] = defaults["iters"]
    if merged["alpha"] is None:
        merged["alpha"] = 0.5
    if merged["seed"] is None:
        merged["seed"] = 0
    if merged["folds"] is None:
        merged["folds"] = 4
    if merged["out"] is None:
        merged["out"] = "results"
    if merged["inducing"] is None:
        merged["inducing"] = 50
    plots = not args.no_plots and file_values.get("plots", True)
    return ExperimentConfig(plots=bool(plots), **merged)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "check":
        failures = run_checks_cmd()
        return 1 if failures else 0
    try:
        cfg = _resolve_run_config(args)
    except (ValueError, OSError, ParseError) as err:
        print(f"error: configuration invalid before any compute: {err}", file=sys.stderr)
        return 2
    try:
        summary = run_experiment(cfg)
    except (NotPSD, NonPSDCavity) as err:
        print(
            f"error: PSD failure under unguarded rule {cfg.rule!r}: {err}", file=sys.stderr
        )
        return 1
    except ParseError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    nlpd = summary["mean_final_test_nlpd"]
    nlpd_txt = "n/a" if nlpd is None else f"{nlpd:.4f}"
    print(
        f"{summary['experiment']} rule={summary['rule']} folds={summary['folds']} "
        f"mean final test NLPD={nlpd_txt} "
        f"psd-violations={summary['total_psd_violations']}"
    )
    if any(summary["stopped_early"]):
        marked = [i for i, s in enumerate(summary["stopped_early"]) if s]
        print(f"note: folds {marked} ended at the last stable step before failure")
    print(f"wrote {summary['mean_file']}")
    return 0


def run_checks_cmd():
    from .checks import run_checks

    return run_checks()


if __name__ == "__main__":
    sys.exit(main())
