"""Command-line entry point.

Subcommands: run, calibrate, defaults, rates, field-probe, list.
Exit code 0 on success; any failure prints a machine-readable error JSON to
stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from cavitybelt.config import (ConfigError, ExperimentConfig, config_to_text,
                               load_config, parse_config_text, validate_config)
from cavitybelt.fields import (LatticeConfiguration, Mode, Position, force,
                               potential)
from cavitybelt.rates import local_scattering_rate, rate_budget
from cavitybelt.scenarios import (ScenarioSpec, calibrate, emit_summary,
                                  list_scenarios, run_scenario)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Single-atom transport and positioning in an optical "
                    "micro-cavity: scenario runner and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a named scenario")
    run.add_argument("scenario", help="scenario name (see `simulate list`)")
    run.add_argument("--config", help="config file with overrides")
    run.add_argument("--seed", type=int, default=0, help="master seed")
    run.add_argument("--trials", type=int, default=None,
                     help="trial count (scenario default when omitted)")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--threads", type=int, default=1,
                     help="concurrent trials (never affects results)")
    run.add_argument("--fast-start", action="store_true",
                     help="skip the loading simulation where applicable")

    cal = sub.add_parser("calibrate", help="fit model parameters to targets")
    cal.add_argument("--config", help="baseline config file")
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--targets", nargs="*", default=None, metavar="NAME=VALUE",
                     help="e.g. guide_period=0.2 hop_growth=135e-9 "
                          "(defaults: all known targets)")

    dfl = sub.add_parser("defaults", help="print the default config")
    dfl.add_argument("--config", help="overrides to apply before printing")

    rts = sub.add_parser("rates", help="print the scattering-rate budget")
    rts.add_argument("--config", help="config file with overrides")

    prb = sub.add_parser("field-probe", help="potential, force, and rate at a point")
    prb.add_argument("--x", type=float, default=0.0, help="m")
    prb.add_argument("--y", type=float, default=0.0, help="m")
    prb.add_argument("--z", type=float, default=0.0, help="m")
    prb.add_argument("--mode", choices=["tem00", "tem01"], default="tem00")
    prb.add_argument("--offset", type=float, default=0.0,
                     help="conveyor offset, m")
    prb.add_argument("--no-sw", action="store_true", help="standing wave off")
    prb.add_argument("--no-ic", action="store_true", help="intracavity trap off")
    prb.add_argument("--guide", action="store_true", help="guide beam on")
    prb.add_argument("--config", help="config file with overrides")

    sub.add_parser("list", help="list registered scenarios")
    return parser


def _load(config_path: str | None) -> ExperimentConfig:
    if config_path is None:
        return validate_config(ExperimentConfig())
    return validate_config(load_config(config_path))


def _cmd_run(args) -> dict:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides = parse_config_text(fh.read())
    spec = ScenarioSpec(args.scenario, overrides=overrides,
                        n_trials=args.trials, master_seed=args.seed,
                        output_dir=args.out, fast_start=args.fast_start,
                        threads=args.threads)
    result = run_scenario(spec)
    out = {"provenance": result.provenance(), "summary": result.summary}
    if args.out:
        out["written"] = emit_summary(result)
    return out


def _cmd_calibrate(args) -> dict:
    targets = None
    if args.targets:
        targets = {}
        for item in args.targets:
            name, _, value = item.partition("=")
            if not value:
                raise ValueError(f"malformed target {item!r}; expected NAME=VALUE")
            targets[name] = float(value)
    patch, report = calibrate(targets, _load(args.config), args.seed)
    return {"patch": patch, "report": report}


def _cmd_field_probe(args) -> dict:
    cfg = _load(args.config)
    pos = Position(args.x, args.y, args.z)
    lattice = LatticeConfiguration(conveyor_offset=args.offset,
                                   sw_on=not args.no_sw,
                                   ic_on=not args.no_ic,
                                   guide_on=args.guide)
    mode = Mode.TEM00 if args.mode == "tem00" else Mode.TEM01
    f = force(pos, lattice, cfg)
    return {
        "position_m": [args.x, args.y, args.z],
        "conveyor_offset_m": args.offset,
        "potential_J": float(potential(pos, lattice, cfg)),
        "force_N": np.asarray(f, dtype=float).tolist(),
        "mode": args.mode,
        "scattering_rate_per_s": float(local_scattering_rate(pos, mode, cfg)),
    }


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            payload = _cmd_run(args)
        elif args.command == "calibrate":
            payload = _cmd_calibrate(args)
        elif args.command == "defaults":
            print(config_to_text(_load(args.config)))
            return 0
        elif args.command == "rates":
            payload = rate_budget(_load(args.config))
        elif args.command == "field-probe":
            payload = _cmd_field_probe(args)
        elif args.command == "list":
            payload = list_scenarios()
        else:  # pragma: no cover - argparse enforces the choices
            raise ValueError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        json.dump({"error": "ConfigError", "message": str(exc),
                   "violations": exc.errors}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
