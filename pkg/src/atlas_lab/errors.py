"""Exception hierarchy shared by all atlas_lab modules.

The CLI maps these onto its exit-code contract: structural problems exit 2,
domain/hypothesis/capacity problems exit 1, numerical failures exit 3.
"""

__all__ = [
    "AtlasLabError",
    "StructuralError",
    "DomainError",
    "StabilityError",
    "HypothesisError",
    "CapacityError",
    "UnavailableError",
    "NumericalError",
    "PathOverflowError",
]


class AtlasLabError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(AtlasLabError, ValueError):
    """Malformed input: wrong shapes, non-finite entries, unparseable config."""


class DomainError(AtlasLabError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class StabilityError(AtlasLabError):
    """The stability (negative partial drift sum) condition is violated."""


class HypothesisError(AtlasLabError):
    """A standing hypothesis (skew symmetry, zero correlations, ...) fails."""


class CapacityError(AtlasLabError):
    """n exceeds the exact-enumeration cap; use the MCMC path instead."""


class UnavailableError(AtlasLabError):
    """The requested quantity was not stored (summaries-only run, wrong mode)."""


class NumericalError(AtlasLabError):
    """Numerical failure: overflow, singular linear system."""


class PathOverflowError(NumericalError):
    """A simulated path left the guard region |Y_i| <= overflow limit."""

    def __init__(self, path: int, step: int, limit: float):
        self.path = path
        self.step = step
        self.limit = limit
        super().__init__(
            f"path {path} aborted at step {step}: |Y| exceeded {limit:g}"
        )
