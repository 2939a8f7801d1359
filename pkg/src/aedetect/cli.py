"""Command-line entry point: ``aedetect <stage> --config run.json``."""
from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .evaluation import ProtocolError

COMMANDS = pipeline.STAGES + ("all",)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aedetect", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", "-c", required=True, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config leaf by dotted path (repeatable)")
    p.add_argument("--force", action="store_true", help="rerun even if up to date; skip dependency checks")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 is bit-reproducible)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = pipeline.ExperimentConfig.load(args.config, args.overrides)
        with threadpool_limits(limits=args.threads):
            run = pipeline.Run(cfg, force=args.force)
            if args.command == "all":
                pipeline.run_all(run)
            else:
                pipeline.run_stage(run, args.command)
    except (pipeline.ConfigError, pipeline.DependencyError, ProtocolError) as exc:
        print(f"aedetect: error: {exc}", file=sys.stderr)
        return 2
    ran = ", ".join(run.executed) or "nothing (up to date)"
    print(f"ran: {ran}; outputs in {run.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
