"""``astroloc`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
corrupt artifact), 4 network error, 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import requests

from . import __version__, pipeline
from .config import ConfigError, RunConfig, Seeds, dump_config, load_config
from .database import CatalogError
from .evaluation import MissingGroundTruthError
from .features import CorruptStoreError
from .index import IndexError_
from .tiles import TileError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NETWORK = 0, 1, 2, 3, 4

COMMANDS = {
    "build-db": (pipeline.cmd_build_db, "enumerate regions and gather their yearly images"),
    "build-evalset": (pipeline.cmd_build_evalset, "select queries and visible database regions"),
    "extract": (pipeline.cmd_extract, "compute base features for database images and queries"),
    "train": (pipeline.cmd_train, "train the linear head"),
    "index": (pipeline.cmd_index, "build the rotation-augmented index"),
    "query": (pipeline.cmd_query, "search every query against the index"),
    "eval": (pipeline.cmd_eval, "score predictions and write reports"),
    "plot": (pipeline.cmd_plot, "render binned recall curves to SVG"),
    "bench": (pipeline.cmd_bench, "time numba kernels against the numpy fallback"),
    "run": (pipeline.run_all, "build-db through eval in one go"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. optimizer.lr=1e-3 (repeatable)")
    common.add_argument("--seed", type=int, help="base seed for all named seeds")
    common.add_argument("--jobs", type=int, help="worker threads")
    common.add_argument("--cache-dir", help="tile cache directory")
    common.add_argument("--workdir", help="run directory for all artifacts")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="astroloc", description="Localize astronaut photographs by retrieval.",
                                 parents=[common])
    ap.add_argument("--version", action="version", version=f"astroloc {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, help=help_text, parents=[common])
    sub.add_parser("show-config", help="print the effective configuration", parents=[common])
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = Seeds.from_base(args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        changes["jobs"] = args.jobs
    paths = {}
    if args.cache_dir:
        paths["cache_dir"] = args.cache_dir
    if args.workdir:
        paths["workdir"] = args.workdir
    if paths:
        changes["paths"] = dataclasses.replace(cfg.paths, **paths)
    return dataclasses.replace(cfg, **changes)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            print(dump_config(cfg), end="")
            return EXIT_OK
        COMMANDS[args.command][0](cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (IndexError_, CorruptStoreError, CatalogError, MissingGroundTruthError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TileError, requests.RequestException) as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        if args.verbose:
            raise
        print(f"error: {type(exc).__name__}: {exc} (re-run with -v for a traceback)", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
