"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 closeness-bound violation found by ``simulate``.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .manifest import STAGES, RunManifest
from .stages import RUNNERS, StageError

log = logging.getLogger("isps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        helptext = "run every stage in order" if name == "run" else f"run the {name} stage"
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", default=None, help="output directory (default: 'out' key of the config)")
        p.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
        p.add_argument("--stage-force", action="store_true", help="recompute even if inputs are unchanged")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 1
    man = RunManifest.open(cfg.out, cfg.config_hash)
    stages = STAGES if args.command == "run" else (args.command,)
    code = 0
    for stage in stages:
        try:
            RUNNERS[stage](cfg, man, force=args.stage_force)
        except StageError as exc:
            print(f"{stage}: {exc}", file=sys.stderr)
            # a bound violation still leaves complete outputs, so the report can follow
            if exc.exit_code != 3 or args.command != "run":
                return exc.exit_code
            code = exc.exit_code
        else:
            log.info("%s done", stage)
    print(f"outputs in {cfg.out}")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
