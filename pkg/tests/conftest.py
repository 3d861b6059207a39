"""Shared fixtures: tiny random instances and a lazily built desk-scale study."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from emore.config import ExperimentConfig, ImageGrid
from emore.dataset import AcquiredDataset

settings.register_profile(
    "emore", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("emore")

SMALL_CONFIG = {
    "grid": {"shape": [32, 32], "voxel_mm": [8.0, 8.0], "n_cardiac": 6, "n_resp": 3},
    "scan_s": 40.0,
    "n_coils": 4,
    "seeds": [1],
    "fractions": [0.2],
}


def small_config(**overrides) -> ExperimentConfig:
    data = dict(SMALL_CONFIG)
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def tiny_dataset(rng, shape=(4, 4), n_resp=1, n_cardiac=2, n_readouts=12, n_coils=2,
                 sigma=0.5, truth=None, noise=True):
    """Random Cartesian-line dataset small enough for dense oracles.

    Readouts sample full lines along axis 0; data are generated from
    ``truth`` (random if omitted) in a random bin, plus complex noise.
    """
    grid = ImageGrid(shape, (1.0,) * len(shape), n_cardiac, n_resp)
    if truth is None:
        truth = crandn(rng, *grid.stack_shape)
    maps = crandn(rng, n_coils, *shape) * 0.5
    n_lines = int(np.prod(shape[1:]))
    table = np.stack([
        np.ravel_multi_index(
            (np.arange(shape[0]),) + tuple(np.full(shape[0], v) for v in np.unravel_index(p, shape[1:])),
            shape,
        )
        for p in range(n_lines)
    ])
    lines = rng.integers(0, n_lines, size=n_readouts)
    indices = table[lines]
    bins = rng.integers(0, grid.n_bins, size=n_readouts)
    spatial = tuple(range(1, len(shape) + 1))
    readouts = np.empty((n_readouts, n_coils, shape[0]), dtype=np.complex128)
    for n in range(n_readouts):
        r, c = grid.split_bin(bins[n])
        k = np.fft.fftn(maps * truth[r, c], axes=spatial, norm="ortho").reshape(n_coils, -1)
        readouts[n] = k[:, indices[n]]
    if noise:
        readouts += sigma / np.sqrt(2) * crandn(rng, *readouts.shape)
    ds = AcquiredDataset(
        grid=grid,
        readouts=readouts.astype(np.complex64),
        indices=indices,
        is_sg=np.zeros(n_readouts, bool),
        time_ms=np.arange(n_readouts) * 4.0,
        coil_maps=maps.astype(np.complex64),
        sigma=sigma,
        tr_ms=4.0,
        truth=truth.astype(np.complex64),
    )
    return ds, bins


class DeskStudy:
    """Desk-scale datasets and runs, produced on first request through the CLI code."""

    def __init__(self, root: Path):
        self.root = root
        self.data_root = root / "data"
        self.results_root = root / "results"
        self.config = ExperimentConfig()
        self._report = None

    def dataset_dir(self, seed: int, fraction: float) -> Path:
        from emore.dataset import save_dataset
        from emore.phantom import dataset_id, generate_dataset

        path = self.data_root / dataset_id(seed, fraction)
        if not (path / "manifest.json").exists():
            save_dataset(generate_dataset(self.config, seed, fraction), path)
        return path

    def run_dir(self, seed: int, fraction: float, method: str) -> Path:
        from emore.cli import reconstruct_one
        from emore.phantom import dataset_id

        path = self.results_root / dataset_id(seed, fraction) / method
        if not (path / "manifest.json").exists():
            self._report = None
            reconstruct_one(self.dataset_dir(seed, fraction), method, self.results_root)
        return path

    def load(self, seed, fraction, method):
        from emore.report import load_run

        return load_run(self.run_dir(seed, fraction, method))

    def wall_time(self, seed, fraction, method) -> float:
        path = self.run_dir(seed, fraction, method) / "timing.json"
        return json.loads(path.read_text())["wall_time_s"]

    def report(self):
        from emore.report import build_report

        if self._report is None:
            self._report = build_report(self.results_root)
        return self._report


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> DeskStudy:
    return DeskStudy(tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="session")
def small_pipeline(tmp_path_factory):
    """Small-config generate + reconstruct (both methods) + report via the CLI."""
    from emore.cli import main

    root = tmp_path_factory.mktemp("small")
    cfg_path = root / "small.json"
    small_config().save(cfg_path)
    assert main(["generate", "--config", str(cfg_path), "--out", str(root / "data")]) == 0
    ds = root / "data" / "seed001_frac20"
    assert main(["reconstruct", str(ds), "--out", str(root / "results")]) == 0
    assert main(["report", str(root / "results")]) == 0
    return root
