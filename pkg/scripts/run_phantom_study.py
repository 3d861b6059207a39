"""Phantom study: generate datasets, reconstruct with CS and EMORe, write the report.

Usage::

    python3 scripts/run_phantom_study.py [--out study] [--seeds 1 2 3]
        [--fractions 0 0.2 0.7] [--config my.json] [--threads 1]

Everything goes through ``emore.cli.main`` so the outputs match the CLI.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from emore.cli import main as emore_main
from emore.phantom import dataset_id


def run(argv) -> None:
    code = emore_main(argv)
    if code:
        sys.exit(code)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="study", help="study root (data/ and results/ inside)")
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.2, 0.7])
    p.add_argument("--config", help="JSON experiment config (grid, scan, solver)")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    root = Path(args.out)
    common = ["--threads", str(args.threads)]
    gen = ["generate", "--out", str(root / "data"), "--seed", *map(str, args.seeds),
           "--fraction", *map(str, args.fractions)]
    if args.config:
        gen += ["--config", args.config]
    run(gen + common)

    datasets = [str(root / "data" / dataset_id(s, f)) for s in args.seeds for f in args.fractions]
    run(["reconstruct", *datasets, "--out", str(root / "results")] + common)
    run(["report", str(root / "results")] + common)

    summary = (root / "results" / "summary.csv").read_text()
    print("\nsummary.csv")
    print(summary)


if __name__ == "__main__":
    main()
