"""Command line entry point: ``thbpass {run,sweep,landscape}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (ALGORITHMS, ExperimentConfig, config_from_dict, emit, landscape_scan,
                      load_config, run, sample_users, toy_config)
from .model import ConfigError


def _load(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        exp.seeds = [args.seed]
    if getattr(args, "algorithm", None):
        exp.algorithm = args.algorithm
    if args.out:
        exp.output_dir = args.out
    return exp


def _cmd_run(args, sweep: bool) -> int:
    exp = _load(args)
    if sweep and exp.sweep is None:
        raise ConfigError("sweep needs a 'sweep' block in the config")
    if not sweep:
        exp.sweep = None
    records = run(exp)
    paths = emit(records, exp.output_dir, prefix="sweep" if sweep else "run")
    for rec in records:
        status = f"wsr={rec.wsr:.6g}" if rec.finite else f"FAILED {rec.error}"
        print(f"{rec.run_id}: {status}")
    print(f"wrote {paths['csv']}")
    return 0 if all(r.finite for r in records) else 1


def _cmd_landscape(args) -> int:
    exp = _load(args)
    system = exp.system if (exp.system.M, exp.system.N) == (2, 1) else toy_config(exp.system)
    seed = exp.seeds[0]
    users = sample_users(system, seed)
    step = args.grid_step or exp.landscape.get("grid_step", 5e-3)
    objective = args.objective or exp.landscape.get("objective", "zf")
    out = Path(exp.output_dir) / f"landscape_s{seed}.csv"
    res = landscape_scan(system, users, step, objective=objective, seed=seed, csv_path=out)
    print(json.dumps({"seed": seed, "objective": objective, "grid_points": int(res.values.size),
                      "strict_local_maxima": res.local_maxima,
                      "max_value": float(res.values.max())}))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thbpass",
                                     description="Tri-hybrid beamforming experiments for pinching-antenna systems")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
        p.add_argument("--out", help="output directory")

    for name, text in (("run", "run one algorithm over the configured seeds"),
                       ("sweep", "run the configured parameter sweep")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--algorithm", choices=ALGORITHMS)
    p = sub.add_parser("landscape", help="scan the two-PA objective landscape")
    common(p)
    p.add_argument("--grid-step", type=float, help="grid resolution in meters (default 0.005)")
    p.add_argument("--objective", choices=("pinching", "zf"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "landscape":
            return _cmd_landscape(args)
        return _cmd_run(args, sweep=args.command == "sweep")
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
