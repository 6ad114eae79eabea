"""Command-line entry point.

    fisherlens train --config cfg.toml [--out DIR] [--seed N]
    fisherlens eval  --config cfg.toml [--out DIR] [--seed N]
    fisherlens sweep --config cfg.toml [--out DIR] [--seed N]
    fisherlens plot  --config cfg.toml [--out DIR]

--out and --seed override experiment.out_dir and experiment.seed from the
config.  Exit status 0 on success, 2 for config and format problems, 1 for
anything else the library rejects.  A malformed config never leaves a
partial metrics file behind.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import (ConfigError, ContractError, DegenerateInputError,
                     DimensionError, FormatError, NumericError, StateError)
from .harness import cmd_eval, cmd_plot, cmd_sweep_complexity, cmd_train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fisherlens",
        description="train small classifiers and measure the geometry of "
                    "what they learned")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = (
        ("train", "train one network and log per-epoch metrics"),
        ("eval", "evaluate a stored checkpoint"),
        ("sweep", "train several architectures and tabulate robustness"),
        ("plot", "render figures from metrics CSVs"),
    )
    for name, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None,
                       help="experiment seed override (unsigned)")
    return parser


def _run(args) -> int:
    if args.seed is not None and args.seed < 0:
        raise ConfigError(f"--seed must be >= 0, got {args.seed}")
    if args.command == "train":
        manifest = cmd_train(args.config, args.out, args.seed)
        print(f"wrote {manifest['csv_path']} and {manifest['extra_csv_path']} "
              f"(config {manifest['config_hash'][:12]})")
    elif args.command == "eval":
        report = cmd_eval(args.config, args.out, args.seed)
        print(json.dumps(report, indent=2, sort_keys=True))
    elif args.command == "sweep":
        manifest = cmd_sweep_complexity(args.config, args.out, args.seed)
        print(f"wrote {manifest['csv_path']} and {manifest['table_path']} "
              f"(config {manifest['config_hash'][:12]})")
    else:
        path = cmd_plot(args.config, args.out, args.seed)
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, DegenerateInputError, DimensionError,
            NumericError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
