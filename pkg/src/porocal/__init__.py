"""porocal: porous-RVE damage simulation, cluster-based reduction, and
multi-fidelity calibration of damage parameters.
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    ConfigError,
    ConnectivityError,
    ConstitutiveError,
    FitError,
    PorocalError,
    ReconstructionError,
    SolverError,
)

__all__ = [
    "__version__",
    "CalibrationError",
    "ConfigError",
    "ConnectivityError",
    "ConstitutiveError",
    "FitError",
    "PorocalError",
    "ReconstructionError",
    "SolverError",
]
