"""Command line entry point: ``fedpon run|report|plot|diagnose|norm-imbalance``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .. import analysis
from .config import ALL, ExperimentConfig
from .report import MissingRuns, format_table, plot, report
from .runner import log_progress, run


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(
        strategy=args.strategy,
        seeds=[args.seed] if args.seed is not None else None,
        output_dir=args.out,
        rounds=args.rounds,
    )
    for a in run(cfg, progress=log_progress):
        print(a.path)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    table = report(args.in_dir, args.threshold)
    print(format_table(table))
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    for p in plot(args.in_dir):
        print(p)
    return 0


def _cmd_diagnose(args: argparse.Namespace) -> int:
    in_dir = Path(args.in_dir)
    runs = {p.parent.name: p.parent for p in sorted(in_dir.glob("*/metrics.csv"))}
    if not runs:
        raise MissingRuns([])
    path = analysis.write_diagnosis(runs, in_dir / "diagnosis")
    print(path.read_text(), end="")
    return 0


def _cmd_norm_imbalance(args: argparse.Namespace) -> int:
    rep = analysis.norm_imbalance_experiment(args.ratio, args.steps, args.seed)
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every configured strategy and seed")
    r.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    r.add_argument("--strategy", help=f"strategy name or {ALL!r}")
    r.add_argument("--seed", type=int, help="run this single seed")
    r.add_argument("--rounds", type=int)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=_cmd_run)

    for name, func, text in (("report", _cmd_report, "summary table"), ("plot", _cmd_plot, "SVG learning curves"),
                             ("diagnose", _cmd_diagnose, "observation-distribution series")):
        c = sub.add_parser(name, help=text)
        c.add_argument("--in", dest="in_dir", required=True)
        c.set_defaults(func=func)
        if name == "report":
            c.add_argument("--threshold", type=float, default=-20.0, help="return level for steps-to-threshold")

    n = sub.add_parser("norm-imbalance", help="linear two-agent weight-norm diagnostic")
    n.add_argument("--ratio", type=float, required=True)
    n.add_argument("--steps", type=int, default=2000)
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=_cmd_norm_imbalance)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
