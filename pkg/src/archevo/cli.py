"""Command line front end.

Exit codes: 0 success, 2 configuration problems, 3 consensus failure,
4 unreadable or malformed input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import ConfigError, RunConfig, load_config
from .consensus import ConsensusError
from .diversity import structural_diversity
from .graph import GraphParseError, parse, validate
from .orchestrator import resume as resume_run
from .orchestrator import run as run_search
from .reporting import write_report
from .runlog import CorruptLogError, IncompatibleLogError, read_records

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONSENSUS = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="archevo",
        description="Evolutionary block-architecture search with a "
                    "reflective exploration controller.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a search and write a run log")
    p_run.add_argument("--config", help="INI run configuration file")
    p_run.add_argument("--seed", type=int, help="override the search seed")
    p_run.add_argument("--log", help="override the run log path")
    p_run.add_argument("--resume", action="store_true",
                       help="continue an interrupted log instead of starting over")

    p_report = sub.add_parser("report",
                              help="render tables and figures from a run log")
    p_report.add_argument("log", help="run log file")
    p_report.add_argument("--out", default="report",
                          help="output directory (default: report)")

    p_val = sub.add_parser("validate-graph",
                           help="check a block graph file and print a report")
    p_val.add_argument("graph", help="graph JSON file")

    p_div = sub.add_parser("diversity",
                           help="structural diversity between two graph files")
    p_div.add_argument("graph_a")
    p_div.add_argument("graph_b")
    return parser


def _load_graph(path: str):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, search=dataclasses.replace(cfg.search, seed=args.seed))
    if args.log:
        cfg = dataclasses.replace(
            cfg, search=dataclasses.replace(cfg.search, log_path=args.log))
    result = resume_run(cfg) if args.resume else run_search(cfg)
    print(f"log written: {result.log_path}")
    if result.metrics is not None:
        rate = result.metrics["success_rate"]
        print(f"children: {result.metrics['children']}  "
              f"successes: {result.metrics['successes']}  "
              f"success rate: {rate:.3f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    records = read_records(args.log)
    written = write_report(records, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def _cmd_validate(args) -> int:
    g = _load_graph(args.graph)
    report = validate(g)
    doc = {
        "valid": report.ok,
        "violations": [
            {"rule": v.rule, "node": v.node, "message": v.message}
            for v in report.violations
        ],
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _cmd_diversity(args) -> int:
    a = _load_graph(args.graph_a)
    b = _load_graph(args.graph_b)
    print(f"{structural_diversity(a, b):.6f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "report": _cmd_report,
        "validate-graph": _cmd_validate,
        "diversity": _cmd_diversity,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, IncompatibleLogError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConsensusError as exc:
        print(f"consensus failed: {exc}", file=sys.stderr)
        return EXIT_CONSENSUS
    except (OSError, CorruptLogError, GraphParseError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
