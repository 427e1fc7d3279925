"""Command line entry point: ``promptens {ingest,run,optimize,train-mlp,evaluate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .aggregate import METHODS

logger = logging.getLogger("promptens")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptens", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML or JSON run config")
        p.add_argument("--seed", type=int, default=None)
        return p

    add("ingest", "load, binarize and select labels; write manifest.json")
    run = add("run", "query the extraction model for every case and fill the cache")
    run.add_argument("--dry-run", action="store_true", help="print the number of pending requests and exit")
    add("optimize", "fit per-label linear prompt weights")
    add("train-mlp", "train the weight-predicting network")
    ev = add("evaluate", "write metrics tables, histograms and median summaries")
    ev.add_argument("--method", action="append", choices=METHODS, help="restrict to these methods (repeatable)")
    ev.add_argument("--threshold", type=float, default=None)
    ev.add_argument("--cap", type=float, default=None)
    ev.add_argument("--bins", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    overrides = {"seed": args.seed}
    for key in ("threshold", "cap", "bins"):
        overrides[key] = getattr(args, key, None)
    try:
        cfg = pipeline.load_config(args.config, overrides)
        if args.command == "ingest":
            result = pipeline.cmd_ingest(cfg)
        elif args.command == "run":
            result = pipeline.cmd_run(cfg, dry_run=args.dry_run)
        elif args.command == "optimize":
            result = pipeline.cmd_optimize(cfg)
        elif args.command == "train-mlp":
            result = pipeline.cmd_train_mlp(cfg)
        else:
            result = pipeline.cmd_evaluate(cfg, methods=args.method)
    except Exception as exc:  # report, don't trace
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
