"""Command-line driver: generate -> reconstruct (cs | emore) -> report.

Exit codes: 0 success, 2 configuration error, 3 solver/gating/metric
error, 4 I/O error (including an empty results root).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from emore.config import ExperimentConfig, check_fraction
from emore.dataset import load_dataset, save_dataset
from emore.errors import ConfigError, EmoreError
from emore.gating import assign_bins, extract_surrogates, write_gating_csv
from emore.operators import set_fft_workers
from emore.phantom import dataset_id, generate_dataset
from emore.recon import cs_baseline, emore
from emore.report import NothingToReport, build_report, save_run

log = logging.getLogger("emore")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=tuple(args.seed))
    if getattr(args, "fraction", None) is not None:
        cfg = replace(cfg, fractions=tuple(check_fraction(f) for f in args.fraction))
    return cfg


def cmd_generate(args) -> list[Path]:
    cfg = load_config(args)
    root = Path(args.out or cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cfg.save(root / "config.json")
    written = []
    for seed in cfg.seeds:
        for frac in cfg.fractions:
            ds = generate_dataset(cfg, seed, frac)
            path = save_dataset(ds, root / dataset_id(seed, frac))
            log.info("wrote %s", path)
            written.append(path)
    return written


def reconstruct_one(dataset_dir, method: str, out_root, params=None, checkpoint_every=0):
    """Gate and reconstruct one dataset; returns the run directory."""
    if method not in ("cs", "emore"):
        raise ConfigError(f"unknown method {method!r}")
    dataset_dir = Path(dataset_dir)
    if not (dataset_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset manifest in {dataset_dir}")
    dataset = load_dataset(dataset_dir)
    if params is None:
        stored = dataset.meta.get("config")
        params = ExperimentConfig.from_dict(stored).solver if stored else ExperimentConfig().solver
    run_dir = Path(out_root) / dataset.dataset_id / method
    run_dir.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    signals = extract_surrogates(dataset)
    assignment = assign_bins(signals, dataset.grid)
    if method == "emore":
        result = emore(dataset, assignment, params, checkpoint_dir=run_dir / "checkpoints",
                       checkpoint_every=checkpoint_every, return_result=True)
    else:
        result = cs_baseline(dataset, assignment, params, return_result=True)
    wall = time.perf_counter() - start

    write_gating_csv(run_dir / "gating.csv", signals, assignment)
    manifest = {
        "dataset_id": dataset.dataset_id,
        "dataset_dir": os.path.relpath(dataset_dir.resolve(), run_dir.resolve()),
        "method": method,
        "fraction": float(dataset.meta.get("fraction", float("nan"))),
        "seed": dataset.meta.get("seed"),
        "grid": asdict(dataset.grid),
        "solver": asdict(params),
        "iterations": result.iterations,
        "converged": result.converged,
        "image_dtype": "complex64",
        "image_shape": list(dataset.grid.stack_shape),
        "weights_shape": None if result.weights is None else list(result.weights.shape),
    }
    save_run(run_dir, result.image, result.weights, result.trace, manifest, wall)
    log.info("%s %s: %d outer iterations, converged=%s, %.1f s", dataset.dataset_id, method,
             result.iterations, result.converged, wall)
    return run_dir


def cmd_reconstruct(args) -> list[Path]:
    out = Path(args.out or "results")
    params = ExperimentConfig.load(args.config).solver if args.config else None
    runs = []
    for ds_dir in args.datasets:
        for method in args.method:
            runs.append(reconstruct_one(ds_dir, method, out, params, args.checkpoint_every))
    return runs


def cmd_report(args):
    out = build_report(args.results, args.out)
    for row in out["summary"]:
        log.info("fraction %.2f: dPSNR %.2f dB, dSSIM %.4f, dBrier %.4f", row["fraction"],
                 row["delta_psnr"], row["delta_ssim"], row["delta_brier"])
    return out


def _global_flags(parser, suppress: bool) -> None:
    threads = argparse.SUPPRESS if suppress else 1
    verbose = argparse.SUPPRESS if suppress else False
    parser.add_argument("--threads", type=int, default=threads,
                        help="BLAS and FFT worker threads (results do not depend on it)")
    parser.add_argument("-v", "--verbose", action="store_true", default=verbose)


def build_parser() -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so a value
    # given before the subcommand is not overwritten
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="emore", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate phantom datasets")
    g.add_argument("--config", help="JSON experiment config")
    g.add_argument("--seed", type=int, nargs="+", help="override config seeds")
    g.add_argument("--fraction", type=float, nargs="+", help="override corruption fractions")
    g.add_argument("--out", help="output root (default: config out_dir)")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", parents=[common], help="gate and reconstruct datasets")
    r.add_argument("datasets", nargs="+", help="dataset directories")
    r.add_argument("--method", nargs="+", choices=("cs", "emore"), default=["cs", "emore"])
    r.add_argument("--config", help="JSON config whose solver block overrides the dataset's")
    r.add_argument("--out", help="results root (default: results)")
    r.add_argument("--checkpoint-every", type=int, default=0,
                   help="write EMORe weight checkpoints every N outer iterations")
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("report", parents=[common], help="score runs and write report files")
    s.add_argument("results", help="results root")
    s.add_argument("--out", help="report directory (default: results root)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        log.error("--threads must be >= 1")
        return EXIT_CONFIG
    if getattr(args, "checkpoint_every", 0) < 0:
        log.error("--checkpoint-every must be >= 0")
        return EXIT_CONFIG
    set_fft_workers(args.threads)
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except NothingToReport as exc:
        log.error("%s", exc)
        return EXIT_IO
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except EmoreError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
