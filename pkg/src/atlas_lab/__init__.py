"""atlas_lab: simulation and analytics for hybrid Atlas equity-market models.

Submodules
----------
model      parameter container and standing-assumption checks
ranks      permutation machinery and order statistics
invariant  exact and MCMC stationary law of gaps and chambers
sde        Euler Monte Carlo engine for the full system
capcurve   capital-distribution-curve analytics
portfolio  portfolio constructions and long-run growth comparisons
cli        command-line entry points
"""

__version__ = "0.1.0"

from .errors import (
    AtlasLabError,
    CapacityError,
    DomainError,
    HypothesisError,
    NumericalError,
    PathOverflowError,
    StabilityError,
    StructuralError,
    UnavailableError,
)
from .model import ModelParams, ValidationReport, validate
from .ranks import Permutation

__all__ = [
    "__version__",
    "AtlasLabError",
    "CapacityError",
    "DomainError",
    "HypothesisError",
    "NumericalError",
    "PathOverflowError",
    "StabilityError",
    "StructuralError",
    "UnavailableError",
    "ModelParams",
    "ValidationReport",
    "validate",
    "Permutation",
]
