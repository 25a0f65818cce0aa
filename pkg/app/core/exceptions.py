"""
Custom exceptions for the model-free bounds solver.
"""
from typing import Any, Optional


class BoundsError(Exception):
    """Base exception for the bounds solver."""
    pass


class ConfigurationError(BoundsError):
    """Raised when a run configuration is invalid or incomplete."""
    pass


class InvalidArgumentError(BoundsError):
    """Raised when an operation receives an argument outside its domain."""
    pass


class MarketSpecError(BoundsError):
    """Raised when market parameters violate their invariants."""
    pass


class FactorizationError(MarketSpecError):
    """Raised when the correlation matrix admits no factorization."""
    pass


class DimensionMismatchError(BoundsError):
    """Raised when a payoff, batch or market disagree on the asset count."""
    pass


class PayoffError(BoundsError):
    """Base exception for payoff expression failures."""
    pass


class PayoffSyntaxError(PayoffError):
    """Raised when payoff text does not follow the grammar."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class PayoffArityError(PayoffSyntaxError):
    """Raised when a payoff function receives the wrong number of arguments."""
    pass


class PayoffBindingError(PayoffError):
    """Raised when a payoff references an asset outside 1..d."""
    pass


class PayoffEvaluationError(PayoffError):
    """Raised when a payoff cannot be evaluated on a row."""

    def __init__(self, message: str, row: int):
        super().__init__(f"{message} (row {row})")
        self.row = row


class TrainingAbortedError(BoundsError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration
        self.reason = message


class InfeasibleProblemError(BoundsError):
    """Raised when the discretized price constraints admit no coupling."""

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report


class SizeCapExceededError(BoundsError):
    """Raised when a discretized instance exceeds the configured size cap."""
    pass


class InstrumentNotFoundError(BoundsError):
    """Raised when an instrument is not found in the repository."""
    pass


class CheckpointError(BoundsError):
    """Raised when a training checkpoint cannot be written or restored."""
    pass


class SolverError(BoundsError):
    """Raised when a numerical backend fails unexpectedly."""
    pass


class ExperimentJobError(BoundsError):
    """Raised when one case/strike job of an experiment fails unexpectedly."""
    pass
