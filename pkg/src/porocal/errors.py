"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
ReconstructionError -> 3, SolverError -> 4, FitError -> 5.
"""


class PorocalError(Exception):
    """Base class for all package errors."""


class ConfigError(PorocalError):
    """Invalid configuration, bounds, or arguments."""


class ReconstructionError(PorocalError):
    """Microstructure reconstruction failed to satisfy tolerances.

    Carries the best achieved descriptors in ``best_achieved``.
    """

    def __init__(self, message, best_achieved=None):
        super().__init__(message)
        self.best_achieved = best_achieved


class ConnectivityError(PorocalError):
    """Matrix voxels do not form a single face-connected component."""


class ConstitutiveError(PorocalError):
    """Point-wise constitutive update failed."""


class SolverError(PorocalError):
    """Newton solve diverged.  Carries step index and residual history."""

    def __init__(self, message, step=None, residual_history=None):
        super().__init__(message)
        self.step = step
        self.residual_history = residual_history or []


class FitError(PorocalError):
    """Surrogate-model training failed (conditioning or optimization)."""


class CalibrationError(PorocalError):
    """Inverse calibration failed for all starts."""
