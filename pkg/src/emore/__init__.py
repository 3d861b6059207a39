"""EM-guided soft bin correction and outlier rejection for motion-resolved MRI."""

from emore.config import ExperimentConfig, ImageGrid, SolverParams
from emore.errors import (
    ConfigError,
    EmoreError,
    GatingError,
    GenerationError,
    MetricError,
    SolverError,
)

__all__ = [
    "ConfigError",
    "EmoreError",
    "ExperimentConfig",
    "GatingError",
    "GenerationError",
    "ImageGrid",
    "MetricError",
    "SolverError",
    "SolverParams",
]

__version__ = "0.1.0"
