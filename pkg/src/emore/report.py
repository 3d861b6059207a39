"""Result directories, scoring and report files.

A results root holds one directory per ``<dataset_id>/<method>`` with::

    manifest.json   method, dataset path relative to this directory, solver
                    settings, convergence
    image.c64       (n_resp, n_cardiac, *grid) little-endian complex64
    weights.f32     (N, K+1) little-endian float32, EMORe only
    trace.csv       per-iteration objective, image change, outlier mass
    gating.csv      surrogates and the hard assignment g_n
    timing.json     wall-clock seconds (kept apart so the rest is byte-stable)
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from emore.config import ExperimentConfig, ImageGrid
from emore.dataset import load_dataset
from emore.errors import ConfigError, MetricError
from emore.gating import read_assignment_csv
from emore.metrics import (
    brier,
    edge_sharpness,
    edge_spec_from_scene,
    format_psnr,
    outlier_detection_scores,
    psnr,
    ssim,
    true_weights,
)
from emore.phantom import default_scene

METHODS = ("cs", "emore")
METRIC_FIELDS = ("dataset_id", "method", "fraction", "psnr", "ssim", "edge_sharpness",
                 "brier", "precision", "recall")
_C64 = np.dtype("<c8")
_F32 = np.dtype("<f4")


class NothingToReport(ConfigError):
    pass


def save_run(directory, image, weights, trace_rows, manifest: dict, wall_time_s: float):
    from emore.recon import write_trace_csv

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(image, dtype=_C64).tofile(directory / "image.c64")
    if weights is not None:
        np.ascontiguousarray(weights, dtype=_F32).tofile(directory / "weights.f32")
    write_trace_csv(directory / "trace.csv", trace_rows)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (directory / "timing.json").write_text(json.dumps({"wall_time_s": wall_time_s}) + "\n")
    return directory


def load_run(directory) -> dict:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    grid = ImageGrid(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in manifest["grid"].items()})
    image = np.fromfile(directory / "image.c64", dtype=_C64).reshape(grid.stack_shape)
    weights = None
    if (directory / "weights.f32").exists():
        weights = np.fromfile(directory / "weights.f32", dtype=_F32).reshape(
            manifest["weights_shape"])
    timing = json.loads((directory / "timing.json").read_text()) if (
        directory / "timing.json").exists() else {}
    return {"dir": directory, "manifest": manifest, "grid": grid, "image": image,
            "weights": weights, "wall_time_s": timing.get("wall_time_s", math.nan)}


def find_runs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise NothingToReport(f"results root {root} does not exist")
    runs = sorted(p.parent for p in root.glob("*/*/manifest.json") if p.parent.name in METHODS)
    if not runs:
        raise NothingToReport(f"nothing to report under {root}")
    return runs


def _scene_for(dataset):
    cfg = dataset.meta.get("config")
    shift = ExperimentConfig.from_dict(cfg).resp_shift_mm if cfg else ExperimentConfig().resp_shift_mm
    return default_scene(dataset.grid, shift)


def score_run(run: dict, dataset) -> dict:
    """Metric row for one run; image-reference metrics need a truth stack."""
    man = run["manifest"]
    k = dataset.grid.n_bins
    row = {"dataset_id": man["dataset_id"], "method": man["method"],
           "fraction": man.get("fraction", math.nan)}
    spec = edge_spec_from_scene(_scene_for(dataset), dataset.grid)
    try:
        row["edge_sharpness"] = edge_sharpness(run["image"], spec)
    except MetricError:
        row["edge_sharpness"] = math.nan
    if dataset.truth is None:
        for key in ("psnr", "ssim", "brier", "precision", "recall"):
            row[key] = math.nan
        return row
    row["psnr"] = psnr(run["image"], dataset.truth)
    row["ssim"] = ssim(run["image"], dataset.truth)
    if run["weights"] is not None:
        w = run["weights"].astype(np.float64)
    else:
        assignment = read_assignment_csv(run["dir"] / "gating.csv", dataset.grid)
        w = assignment.one_hot(outlier_column=True)
    if dataset.schedule is not None:
        row["brier"] = brier(w, true_weights(dataset.schedule, k))
        scores = outlier_detection_scores(w, dataset.schedule.is_outlier)
        row["precision"], row["recall"] = scores.precision, scores.recall
    else:
        row["brier"] = row["precision"] = row["recall"] = math.nan
    return row


def _fmt(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _format_row(row: dict) -> list[str]:
    out = []
    for key in METRIC_FIELDS:
        value = row.get(key, math.nan)
        out.append(format_psnr(value) if key == "psnr" else _fmt(value))
    return out


def write_metrics_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow(_format_row(row))
    return path


def summarize(rows) -> list[dict]:
    """Per-fraction means of each method and of the paired EMORe - CS differences."""
    by_key = {(r["dataset_id"], r["method"]): r for r in rows}
    fractions = sorted({r["fraction"] for r in rows})
    summary = []
    for frac in fractions:
        pairs = [(by_key[(d, "cs")], by_key[(d, "emore")])
                 for d, m in sorted(by_key) if m == "cs" and (d, "emore") in by_key
                 and by_key[(d, "cs")]["fraction"] == frac]
        if not pairs:
            continue
        out = {"fraction": frac, "n_pairs": len(pairs)}
        for metric in ("psnr", "ssim", "edge_sharpness", "brier"):
            cs = np.array([p[0][metric] for p in pairs], float)
            em = np.array([p[1][metric] for p in pairs], float)
            out[f"{metric}_cs"] = float(np.mean(cs))
            out[f"{metric}_emore"] = float(np.mean(em))
            with np.errstate(invalid="ignore"):
                out[f"delta_{metric}"] = float(np.mean(em - cs))
        for metric in ("precision", "recall"):
            out[f"{metric}_emore"] = float(np.mean([p[1][metric] for p in pairs]))
        summary.append(out)
    return summary


def write_summary_csv(path, summary) -> Path:
    path = Path(path)
    if not summary:
        raise NothingToReport("no completed CS/EMORe pair to summarize")
    keys = list(summary[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in summary:
            w.writerow([format_psnr(row[k]) if k.startswith("psnr") and math.isinf(row[k])
                        else _fmt(row[k]) for k in keys])
    return path


def write_pgm(path, image, scale: float) -> Path:
    """16-bit binary PGM of ``|image| * scale``, rounded and clipped."""
    mag = np.abs(np.asarray(image))
    if mag.ndim != 2:
        raise ConfigError("PGM export needs a 2D image")
    vals = np.clip(np.rint(mag * scale), 0, 65535).astype(">u2")
    h, w = vals.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(vals.tobytes())
    return Path(path)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w)


def export_images(directory, stack, name: str, bins=None) -> dict:
    """Representative frames as PGM; returns the manifest entry with the scale."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stack = np.asarray(stack)
    peak = float(np.abs(stack).max())
    scale = 65535.0 / peak if peak > 0 else 1.0
    n_resp, n_card = stack.shape[:2]
    if bins is None:
        bins = [(0, 0), (0, n_card // 2), (n_resp - 1, 0), (n_resp - 1, n_card // 2)]
    files = []
    for r, c in bins:
        frame = stack[r, c]
        if frame.ndim == 3:
            frame = frame[..., frame.shape[-1] // 2]
        fname = f"{name}_r{r}_c{c}.pgm"
        write_pgm(directory / fname, frame, scale)
        files.append(fname)
    return {"name": name, "scale": scale, "files": files,
            "note": "magnitude = pixel / scale"}


def write_readout_csv(path, gating_csv, weights, dataset) -> Path:
    """time, respiratory amplitude, outlier-bin weight and true outlier flag."""
    with open(gating_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    truth = dataset.schedule.is_outlier if dataset.schedule is not None else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time_ms", "resp_amplitude", "outlier_weight", "true_outlier"])
        for i, row in enumerate(rows):
            flag = "" if truth is None else int(truth[i])
            w.writerow([i, row["time_ms"], row["resp_amplitude"],
                        repr(float(weights[i, -1])), flag])
    return Path(path)


def build_report(results_root, out_dir=None) -> dict:
    """Score every run under ``results_root`` and write the report files."""
    root = Path(results_root)
    out = Path(out_dir) if out_dir is not None else root
    out.mkdir(parents=True, exist_ok=True)
    runs = find_runs(root)
    rows, timing, images = [], [], []
    cache = {}
    for run_dir in runs:
        run = load_run(run_dir)
        ds_dir = (run_dir / run["manifest"]["dataset_dir"]).resolve()
        if ds_dir not in cache:
            cache.clear()
            cache[ds_dir] = load_dataset(ds_dir)
        dataset = cache[ds_dir]
        row = score_run(run, dataset)
        rows.append(row)
        write_metrics_csv(run_dir / "metrics.csv", [row])
        timing.append((row["dataset_id"], row["method"], row["fraction"], run["wall_time_s"]))
        tag = f"{row['dataset_id']}_{row['method']}"
        images.append(export_images(out / "images", run["image"], tag))
        if run["weights"] is not None:
            write_readout_csv(run_dir / "readouts.csv", run_dir / "gating.csv",
                              run["weights"], dataset)
        if dataset.truth is not None and row["method"] == "cs":
            images.append(export_images(out / "images", dataset.truth,
                                        f"{row['dataset_id']}_truth"))
    write_metrics_csv(out / "metrics.csv", rows)
    summary = summarize(rows)
    if summary:
        write_summary_csv(out / "summary.csv", summary)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_id", "method", "fraction", "wall_time_s"])
        for d, m, f, t in timing:
            w.writerow([d, m, _fmt(f), _fmt(t)])
    (out / "images" / "images.json").write_text(json.dumps(images, indent=2) + "\n")
    return {"rows": rows, "summary": summary, "timing": timing}

