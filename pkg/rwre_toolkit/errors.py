"""
Exceptions raised by the toolkit.
Every library operation raises one of these; the experiment layer converts them
into error dicts and the CLI maps them to exit codes.
"""

from typing import Optional


class RWREError(Exception):
    """Base class for all toolkit errors."""
    pass


# ----- Model descriptions -----

class ModelSpecError(RWREError):
    """Raised when a model description cannot be turned into a model."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class NonCenteredLaw(ModelSpecError):
    """Raised when a step law has nonzero mean."""
    pass


class NonStochastic(ModelSpecError):
    """Raised when weights, matrix rows or probabilities do not sum to 1."""
    pass


class Reducible(ModelSpecError):
    """Raised when a Markov transition matrix is not irreducible."""
    pass


class EmptyAlphabet(ModelSpecError):
    """Raised when a model has no step laws."""
    pass


# ----- Walks and dynamic programming -----

class LatticeMismatch(RWREError):
    """Raised when a value is not an integer multiple of the lattice unit."""
    pass


class HorizonTooShort(RWREError):
    """Raised when a path has fewer steps than requested."""
    pass


# ----- Harmonic function -----

class AllCensored(RWREError):
    """Raised when every first-passage sample hit the censoring horizon."""
    pass


class InsufficientPrecision(RWREError):
    """Raised when a propagated uncertainty exceeds the configured floor."""
    pass


# ----- Conditioned sampling -----

class ZeroMass(RWREError):
    """Raised when a conditioned kernel has no positive destination."""
    pass


class TableMiss(RWREError):
    """Raised when a UTable does not cover the requested shift or position."""
    pass


class RejectionBudgetExceeded(RWREError):
    """Raised when a rejection sampler runs out of proposals."""
    pass


# ----- Statistics -----

class EmptySample(RWREError):
    """Raised when a goodness-of-fit test receives no samples."""
    pass


class SparseCells(RWREError):
    """Raised when a chi-square cell has expected count below 5."""
    pass


# ----- Runner -----

class ConfigInvalid(RWREError):
    """Raised when an experiment config fails validation."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class ModelInvalid(RWREError):
    """Raised when a model violates the walk assumptions."""
    pass


class AssertionFailed(RWREError):
    """Raised when an enabled experiment assertion does not hold."""
    pass
