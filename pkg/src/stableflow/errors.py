"""Exception hierarchy shared across the library.

Validation errors cover rejected inputs (bad dimensions, broken invariants,
malformed files); numerical errors cover runtime failures of otherwise valid
inputs (non-finite values, degenerate densities, ill-conditioned Jacobians).
The CLI maps these to exit codes 2 and 3 respectively.
"""


class StableFlowError(Exception):
    """Base class for all library errors."""


class ValidationError(StableFlowError):
    """Input violates a documented precondition or invariant."""


class DimensionError(ValidationError):
    """Array dimensions do not match the declared sizes."""


class DatasetFormatError(ValidationError):
    """Dataset or checkpoint file is malformed."""


class NumericalError(StableFlowError):
    """A computation produced non-finite or otherwise unusable values."""


class DegenerateDensityError(NumericalError):
    """Transition density has zero variance and cannot be evaluated."""


class ConditioningError(NumericalError):
    """Jacobian condition number exceeds the verifier's trust threshold."""


class TrainingError(NumericalError):
    """Optimization diverged or could not proceed."""


class GenerationError(StableFlowError):
    """Synthetic data generation failed after bounded retries."""
