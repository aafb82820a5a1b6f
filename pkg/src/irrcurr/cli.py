"""Command-line entry point: ``irrcurr --config run.yaml --stage all``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, ContractViolation, MissingArtifactError, NumericError
from .pipeline import STAGES, Pipeline


def build_parser():
    p = argparse.ArgumentParser(prog="irrcurr", description="Proxy-scored curriculum pretraining pipeline.")
    p.add_argument("stage_arg", nargs="?", choices=(*STAGES, "all"), metavar="STAGE",
                   help="stage to run (same as --stage)")
    p.add_argument("--config", required=True, help="run config (YAML)")
    p.add_argument("--out", help="output directory (overrides the config's 'out')")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--stage", choices=(*STAGES, "all"), help="stage to run (default: all)")
    p.add_argument("--force", action="store_true", help="recompute even when stamps are up to date")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.stage and args.stage_arg and args.stage != args.stage_arg:
        print("irrcurr: error: conflicting stage arguments", file=sys.stderr)
        return 2
    stage = args.stage or args.stage_arg or "all"
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if not cfg.out:
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
        Pipeline(cfg, cfg.out, force=args.force).run(stage)
    except MissingArtifactError as exc:
        print(f"irrcurr: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ContractViolation, NumericError) as exc:
        print(f"irrcurr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
