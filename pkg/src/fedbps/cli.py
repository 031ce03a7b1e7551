"""Command-line interface: ``fedbps run | gradcheck | partition-preview``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import config_from_mapping, parse_config
from .errors import ConfigError
from .harness import cmd_gradcheck, cmd_partition_preview, cmd_run, load_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory (default: output_dir from the config)")

    run = sub.add_parser("run", help="run a federation and write metrics CSV + manifest")
    config_args(run)
    run.add_argument("--manifest", help="re-run the config stored in a run manifest")

    grad = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    grad.add_argument("--spec", choices=("mlp", "cnn"), default="mlp")
    grad.add_argument("--seed", type=int, default=1)

    preview = sub.add_parser("partition-preview", help="per-client label histograms")
    config_args(preview)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "gradcheck":
        code, _ = cmd_gradcheck(args.spec, args.seed)
        return code
    try:
        if getattr(args, "manifest", None):
            if args.config:
                raise ConfigError("--manifest and --config are mutually exclusive")
            config = load_manifest(args.manifest)
            if args.overrides:
                config = config_from_mapping(config.to_dict(), args.overrides)
        else:
            config = parse_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        return cmd_run(config, args.out)
    return cmd_partition_preview(config, args.out)


if __name__ == "__main__":
    sys.exit(main())
