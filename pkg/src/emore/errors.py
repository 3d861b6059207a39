"""Exception hierarchy. The CLI maps these onto exit codes."""


class EmoreError(Exception):
    """Base class for all package errors."""


class ConfigError(EmoreError, ValueError):
    """Invalid configuration, shapes or arguments."""


class GenerationError(EmoreError):
    """Phantom or acquisition generation failed."""


class GatingError(EmoreError):
    """Surrogate extraction or binning failed."""


class SolverError(EmoreError):
    """Iterative solver failed (e.g. CG divergence)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class MetricError(EmoreError):
    """A metric could not be evaluated on the given input."""
