"""Command-line entry point: ``cwfedavg {run,sweep-lambda,verify,export-partition}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import parse_config
from .errors import CwFedError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwfedavg", description="Class-wise federated averaging simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-round debug")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("run", help="run one experiment from a TOML config")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")

    p = sub.add_parser("sweep-lambda", help="cwFedAVG with WDR for several penalty weights")
    p.add_argument("config", type=Path)
    p.add_argument("--lambdas", type=float, nargs="+", required=True, metavar="L")
    p.add_argument("--out", type=Path)

    sub.add_parser("verify", help="run the built-in gradient, aggregation and equivalence checks")

    p = sub.add_parser("export-partition", help="write per-client class counts as CSV")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, help="CSV path (default: <output_dir>/data_distribution.csv)")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "verify":
            from .verify import run_all

            return 0 if run_all() else 1

        cfg = parse_config(args.config)
        if args.command == "run":
            from .runner import run_experiment

            out = args.out or Path(cfg.output_dir)
            summary = run_experiment(cfg, out)
            print(
                f"{summary.algorithm}: best mean accuracy {summary.best_mean_accuracy:.4f} "
                f"(round {summary.best_round}), final mean omega {summary.final_mean_omega:.4f}"
            )
            print(f"artifacts in {out}, manifest sha256 {summary.manifest_checksum}")
        elif args.command == "sweep-lambda":
            from .runner import lambda_sweep

            out = args.out or Path(cfg.output_dir)
            rows = lambda_sweep(cfg, args.lambdas, out)
            print("lambda,best_mean_accuracy,best_round,mean_final_omega")
            for lam, acc, rnd, omega in rows:
                print(f"{lam:g},{acc:.4f},{rnd},{omega:.4f}")
        elif args.command == "export-partition":
            from .runner import export_partition

            out = args.out or Path(cfg.output_dir) / "data_distribution.csv"
            clients = export_partition(cfg, out)
            print(f"wrote {len(clients)} clients to {out}")
    except (CwFedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
