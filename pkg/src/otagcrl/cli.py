"""Command line entry point: ``otagcrl <command> [flags]``.

Exit status is 0 on success, 2 for configuration problems and 3 for failures
while running (missing inputs, non-finite values, corrupt files).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .approximator import NonFiniteError
from .dataset import DatasetError
from .diagnostics import DiagnosticsError
from .experiment import (REPRO_TARGETS, ConfigError, ExperimentConfig, diagnose, evaluate,
                         format_table, gen_data, map_seeds, run_bottleneck_experiment,
                         run_comparison, run_sweep, train, write_resolved_config)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

REPRO_CONFIGS = {"bottleneck": "repro_bottleneck", "consistency": "repro_consistency",
                 "n-sweep": "repro_n_sweep", "gamma": "repro_gamma"}


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required,
                   help="INI config file, or the name of a bundled config")
    p.add_argument("--seed", type=int, help="run this seed only (replaces run.seeds)")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--workers", type=int, default=1, help="seeds run in parallel (default: 1)")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="set a config key; repeatable")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otagcrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("gen-data", "generate the offline dataset"),
                        ("train", "train values (and policies) with checkpoints"),
                        ("eval", "roll out the agent built from a trained run"),
                        ("diagnose", "value profiles and order-consistency CSVs"),
                        ("sweep", "train and diagnose over the values of sweep.key")]:
        _common(sub.add_parser(name, help=help_))
    rp = sub.add_parser("repro", help="bundled comparison recipes")
    rp.add_argument("target", choices=REPRO_TARGETS)
    _common(rp, config_required=False)
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"run.seeds={args.seed}")
    path = args.config
    if path is None and args.command == "repro":
        path = REPRO_CONFIGS[args.target]
    return ExperimentConfig.load(path, overrides)


def run(args) -> int:
    config = load_config(args)
    out = Path(args.out)
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    log = logging.getLogger("otagcrl")
    log.info("config %s hash %s seeds %s", config.source, config.hash,
             ",".join(map(str, config.seeds)))
    cmd = args.command
    if cmd == "gen-data":
        write_resolved_config(config, out)
        for path in map_seeds(gen_data, config, out, args.workers):
            print(path)
    elif cmd == "train":
        write_resolved_config(config, out)
        map_seeds(train, config, out, args.workers)
        print(f"trained seeds {','.join(map(str, config.seeds))} into {out}")
    elif cmd == "eval":
        for seed, rec in zip(config.seeds, map_seeds(evaluate, config, out, args.workers)):
            print(f"seed {seed}: success {rec.success_rate:.3f} "
                  f"mean episode length {rec.mean_episode_len:.1f}")
    elif cmd == "diagnose":
        for seed, rc in zip(config.seeds, map_seeds(diagnose, config, out, args.workers)):
            print(f"seed {seed}: mean r_c {rc:.3f}")
    elif cmd == "sweep":
        _, table = run_sweep(config, out, args.workers)
        print(format_table(table))
    elif cmd == "repro":
        if args.target == "bottleneck":
            _, table = run_bottleneck_experiment(config, out, args.workers)
        else:
            _, table = run_comparison(config, out, args.workers)
        print(format_table(table))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except ConfigError as e:
        print(f"otagcrl: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DatasetError, DiagnosticsError, NonFiniteError, RuntimeError,
            ValueError, KeyError, OSError) as e:
        print(f"otagcrl: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
