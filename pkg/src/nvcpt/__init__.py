"""Four-level coherent population trapping: simulation and fitting toolkit."""

from .dynamics import (
    DensityMatrix,
    DriveParams,
    Liouvillian,
    RelaxationParams,
    build_hamiltonian,
    build_liouvillian,
    evolve,
    fluorescence_rate,
    steady_state,
)
from .errors import (
    DegenerateSteadyStateError,
    EmptySelectionError,
    InvalidParameterError,
    NumericalFailureError,
    UndefinedFractionError,
)

__version__ = "0.1.0"

__all__ = [
    "DensityMatrix",
    "DriveParams",
    "Liouvillian",
    "RelaxationParams",
    "build_hamiltonian",
    "build_liouvillian",
    "evolve",
    "fluorescence_rate",
    "steady_state",
    "DegenerateSteadyStateError",
    "EmptySelectionError",
    "InvalidParameterError",
    "NumericalFailureError",
    "UndefinedFractionError",
    "__version__",
]
