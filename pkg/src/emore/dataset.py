"""Acquired dataset container and its on-disk format.

A dataset directory holds::

    manifest.json     grid, sigma, TR, seeds, schedule summary, array shapes
    readouts.c64      (N, C, S) little-endian complex64
    coil_maps.c64     (C, *grid) little-endian complex64
    truth.c64         (n_resp, n_cardiac, *grid) complex64, optional
    sampling.i32      (N, S) little-endian int32 flat k-space indices
    acquisition.csv   index, time_ms, is_sg
    labels.csv        per-readout truth labels, optional
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emore.config import ImageGrid
from emore.errors import ConfigError

FORMAT_VERSION = 1
_C64 = np.dtype("<c8")
_I32 = np.dtype("<i4")


@dataclass
class AcquiredDataset:
    grid: ImageGrid
    readouts: np.ndarray  # (N, C, S) complex64
    indices: np.ndarray  # (N, S) int
    is_sg: np.ndarray  # (N,) bool
    time_ms: np.ndarray  # (N,) float64
    coil_maps: np.ndarray  # (C, *grid) complex64
    sigma: float
    tr_ms: float
    schedule: object = None  # MotionSchedule, kept for scoring only
    truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.readouts.shape[0]
        if self.indices.shape != (n, self.readouts.shape[2]):
            raise ConfigError("sampling indices do not match the readout array")
        if self.coil_maps.shape != (self.readouts.shape[1],) + self.grid.shape:
            raise ConfigError("coil maps do not match grid and coil count")
        if len(self.is_sg) != n or len(self.time_ms) != n:
            raise ConfigError("per-readout metadata length mismatch")

    @property
    def n_readouts(self) -> int:
        return self.readouts.shape[0]

    @property
    def n_coils(self) -> int:
        return self.readouts.shape[1]

    @property
    def readout_length(self) -> int:
        """L, the number of samples of one readout summed over coils."""
        return self.readouts.shape[1] * self.readouts.shape[2]

    @property
    def dataset_id(self) -> str:
        return self.meta.get("dataset_id", "dataset")

    def readout(self, n: int) -> np.ndarray:
        return self.readouts[n].reshape(-1)


def _write_raw(path, array, dtype):
    np.ascontiguousarray(array, dtype=dtype).tofile(path)


def _read_raw(path, dtype, shape):
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ConfigError(f"{path} holds {data.size} values, expected {expected}")
    return data.reshape(shape)


def save_dataset(ds: AcquiredDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_raw(directory / "readouts.c64", ds.readouts, _C64)
    _write_raw(directory / "coil_maps.c64", ds.coil_maps, _C64)
    _write_raw(directory / "sampling.i32", ds.indices, _I32)
    if ds.truth is not None:
        _write_raw(directory / "truth.c64", ds.truth, _C64)

    with open(directory / "acquisition.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time_ms", "is_sg"])
        for i, (t, sg) in enumerate(zip(ds.time_ms.tolist(), ds.is_sg.tolist())):
            w.writerow([i, repr(t), int(sg)])

    sched = ds.schedule
    if sched is not None:
        with open(directory / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "resp_phase", "cardiac_bin", "cardiac_phase",
                        "resp_amplitude", "outlier_state"])
            rows = zip(sched.resp_phase.tolist(), sched.cardiac_bin.tolist(),
                       sched.cardiac_phase.tolist(), sched.resp_amplitude.tolist(),
                       sched.outlier_state.tolist())
            for i, (rp, cb, cp, ra, st) in enumerate(rows):
                w.writerow([i, rp, cb, repr(cp), repr(ra), st])

    manifest = {
        "format_version": FORMAT_VERSION,
        "grid": {
            "shape": list(ds.grid.shape),
            "voxel_mm": list(ds.grid.voxel_mm),
            "n_cardiac": ds.grid.n_cardiac,
            "n_resp": ds.grid.n_resp,
        },
        "n_readouts": ds.n_readouts,
        "n_coils": ds.n_coils,
        "samples_per_coil": int(ds.readouts.shape[2]),
        "sigma": ds.sigma,
        "tr_ms": ds.tr_ms,
        "has_truth": ds.truth is not None,
        "schedule": sched.summary() if sched is not None else None,
        "meta": ds.meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> AcquiredDataset:
    from emore.phantom import MotionSchedule

    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no dataset manifest in {directory}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError("unsupported dataset format version")
    g = manifest["grid"]
    grid = ImageGrid(tuple(g["shape"]), tuple(g["voxel_mm"]), g["n_cardiac"], g["n_resp"])
    n, c, s = manifest["n_readouts"], manifest["n_coils"], manifest["samples_per_coil"]
    readouts = _read_raw(directory / "readouts.c64", _C64, (n, c, s))
    maps = _read_raw(directory / "coil_maps.c64", _C64, (c,) + grid.shape)
    indices = _read_raw(directory / "sampling.i32", _I32, (n, s)).astype(np.int64)
    truth = None
    if manifest["has_truth"] and (directory / "truth.c64").exists():
        truth = _read_raw(directory / "truth.c64", _C64, grid.stack_shape)

    with open(directory / "acquisition.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    time_ms = np.array([float(r["time_ms"]) for r in rows])
    is_sg = np.array([r["is_sg"] == "1" for r in rows])

    schedule = None
    summary = manifest.get("schedule")
    labels = directory / "labels.csv"
    if summary is not None and labels.exists():
        with open(labels, newline="") as fh:
            lrows = list(csv.DictReader(fh))
        schedule = MotionSchedule(
            time_ms=time_ms.copy(),
            resp_amplitude=np.array([float(r["resp_amplitude"]) for r in lrows]),
            resp_phase=np.array([int(r["resp_phase"]) for r in lrows], dtype=np.int64),
            cardiac_phase=np.array([float(r["cardiac_phase"]) for r in lrows]),
            cardiac_bin=np.array([int(r["cardiac_bin"]) for r in lrows], dtype=np.int64),
            outlier_state=np.array([int(r["outlier_state"]) for r in lrows], dtype=np.int64),
            n_cardiac=summary["n_cardiac"],
            n_resp=summary["n_resp"],
            resp_periods_s=summary["resp_periods_s"],
            rr_ms=summary["rr_ms"],
            r_wave_ms=summary["r_wave_ms"],
            episodes=[tuple(e) for e in summary["episodes"]],
            heart_rate_bpm=summary["heart_rate_bpm"],
            resp_period_s=summary["resp_period_s"],
        )

    return AcquiredDataset(
        grid=grid,
        readouts=readouts,
        indices=indices,
        is_sg=is_sg,
        time_ms=time_ms,
        coil_maps=maps,
        sigma=float(manifest["sigma"]),
        tr_ms=float(manifest["tr_ms"]),
        schedule=schedule,
        truth=truth,
        meta=manifest.get("meta", {}),
    )
