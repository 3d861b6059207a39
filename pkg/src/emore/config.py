"""Configuration dataclasses.

Defaults encode the desk-scale phantom geometry and the published
reconstruction hyperparameters. Everything round-trips through JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from emore.errors import ConfigError

MAX_CORRUPTION = 0.9
STUDY_FRACTIONS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70)


@dataclass(frozen=True)
class ImageGrid:
    """Spatial grid plus motion-bin layout.

    Axis 0 is superior-inferior (the readout direction), axis 1
    anterior-posterior and, in 3D, axis 2 left-right.
    """

    shape: tuple[int, ...] = (64, 64)
    voxel_mm: tuple[float, ...] = (4.0, 4.0)
    n_cardiac: int = 10
    n_resp: int = 4

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "voxel_mm", tuple(float(v) for v in self.voxel_mm))
        if len(self.shape) not in (2, 3):
            raise ConfigError(f"grid must be 2D or 3D, got shape {self.shape}")
        if len(self.voxel_mm) != len(self.shape):
            raise ConfigError("voxel_mm must have one entry per spatial axis")
        if min(self.shape) < 4:
            raise ConfigError(f"all grid extents must be >= 4, got {self.shape}")
        if any(v <= 0 for v in self.voxel_mm):
            raise ConfigError("voxel sizes must be positive")
        if self.n_cardiac < 1 or self.n_resp < 1:
            raise ConfigError("need at least one cardiac and one respiratory bin")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def n_bins(self) -> int:
        """K, the number of valid motion bins."""
        return self.n_cardiac * self.n_resp

    @property
    def n_voxels(self) -> int:
        return math.prod(self.shape)

    @property
    def stack_shape(self) -> tuple[int, ...]:
        """Shape of a motion image stack: (n_resp, n_cardiac, *spatial)."""
        return (self.n_resp, self.n_cardiac) + self.shape

    def flat_bin(self, resp, cardiac):
        """Flat bin index k = resp * n_cardiac + cardiac (0-based)."""
        return resp * self.n_cardiac + cardiac

    def split_bin(self, k):
        """Inverse of :meth:`flat_bin`, returns (resp, cardiac)."""
        return k // self.n_cardiac, k % self.n_cardiac


@dataclass(frozen=True)
class SolverParams:
    """Reconstruction hyperparameters.

    ``tau`` is expressed in units of the noise standard deviation, so the
    outlier log-likelihood is ``-tau**2``. ``rho_scale`` multiplies the median
    curvature of the data term to give the ADMM penalty.
    """

    lambda_s: float = 2e-2
    lambda_c: float = 10e-2
    lambda_r: float = 6e-2
    tau: float = 3.0
    eta: float = 1e-4
    max_outer: int = 60
    init_iters: int = 10
    inner_iters: int = 4
    alpha_g: float = 0.85
    alpha_o: float = 0.05
    rho_scale: float = 0.1
    cg_maxiter: int = 10
    cg_tol: float = 1e-6

    def __post_init__(self):
        for name in ("lambda_s", "lambda_c", "lambda_r", "tau", "eta", "rho_scale", "cg_tol"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("max_outer", "init_iters", "inner_iters", "cg_maxiter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0 <= self.alpha_g <= 1 and 0 <= self.alpha_o <= 1):
            raise ConfigError("alpha_g and alpha_o must be probabilities")
        if self.alpha_g + self.alpha_o > 1 + 1e-12:
            raise ConfigError("alpha_g + alpha_o must not exceed 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Phantom, acquisition and sweep settings for one study."""

    grid: ImageGrid = field(default_factory=ImageGrid)
    n_coils: int = 8
    tr_ms: float = 4.0
    scan_s: float = 120.0
    snr_db: float = 30.0
    acceleration: float = 7.3
    sg_every: int = 10
    hr_range_bpm: tuple[float, float] = (62.0, 83.0)
    rr_jitter_ms: float = 160.0
    resp_period_range_s: tuple[float, float] = (3.25, 4.75)
    resp_period_jitter_s: float = 1.0
    resp_shift_mm: float = 12.0
    n_episodes: int = 10
    supersample: int = 4
    fractions: tuple[float, ...] = (0.0, 0.2)
    seeds: tuple[int, ...] = (1,)
    solver: SolverParams = field(default_factory=SolverParams)
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "hr_range_bpm", tuple(float(v) for v in self.hr_range_bpm))
        object.__setattr__(
            self, "resp_period_range_s", tuple(float(v) for v in self.resp_period_range_s)
        )
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.n_coils < 1:
            raise ConfigError("n_coils must be >= 1")
        if self.tr_ms <= 0 or self.scan_s <= 0:
            raise ConfigError("tr_ms and scan_s must be positive")
        if self.sg_every < 2:
            raise ConfigError("sg_every must be >= 2")
        for f in self.fractions:
            check_fraction(f)
        lo, hi = self.hr_range_bpm
        if not 0 < lo <= hi:
            raise ConfigError("invalid heart-rate range")

    @property
    def n_readouts(self) -> int:
        return int(round(self.scan_s * 1000.0 / self.tr_ms))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "grid" in data and isinstance(data["grid"], dict):
            data["grid"] = _build(ImageGrid, data["grid"])
        if "solver" in data and isinstance(data["solver"], dict):
            data["solver"] = _build(SolverParams, data["solver"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_solver(self, **overrides) -> "ExperimentConfig":
        return replace(self, solver=replace(self.solver, **overrides))


def _build(cls, data):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def check_fraction(fraction: float) -> float:
    if not 0.0 <= fraction <= MAX_CORRUPTION:
        raise ConfigError(
            f"corruption fraction must lie in [0, {MAX_CORRUPTION}], got {fraction}"
        )
    return float(fraction)
