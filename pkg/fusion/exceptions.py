"""
Exception hierarchy for the fusion package.

Validation errors map to CLI exit code 2, numerical errors to exit code 3.
"""

from typing import Optional


class FusionError(Exception):
    """Base class for all fusion errors."""
    exit_code = 1


class FusionValidationError(FusionError):
    """Inputs violate a structural or modeling requirement."""
    exit_code = 2


class FusionNumericalError(FusionError):
    """A numerical requirement (positivity, rank, range) failed."""
    exit_code = 3


class SpaceMismatchError(FusionValidationError):
    """Tables or laws live on incompatible axis sets."""
    pass


class AlignmentError(FusionValidationError):
    """An observed law is not aligned with the ideal law."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class StrongAlignmentError(FusionValidationError):
    """A density ratio required by strong alignment is undefined."""
    pass


class ModelFileError(FusionValidationError):
    """A model or table file failed schema validation."""
    pass


class FrameworkMismatchError(FusionValidationError):
    """A model file does not carry the alignments a framework expects."""
    pass


class InvalidPmfError(FusionValidationError):
    """A probability table is negative, non-finite or not normalized."""
    pass


class ZeroMassError(FusionNumericalError):
    """Conditioning on a zero-mass cell in strict mode."""
    pass


class PositivityError(FusionNumericalError):
    """A positivity condition failed cell-wise."""
    pass


class DegenerateInstrumentError(FusionNumericalError):
    """An instrument or proxy carries no information about its target."""
    pass


class SingularMatrixError(FusionNumericalError):
    """A matrix that must be inverted is singular or badly conditioned."""
    pass


class NotInRangeError(FusionNumericalError):
    """A right-hand side lies outside the numerical range of an operator."""

    def __init__(self, message: str, residual: Optional[float] = None):
        super().__init__(message)
        self.residual = residual


class DecompositionFailed(FusionNumericalError):
    """DECOMPOSE returned FAIL: the ideal influence function has no decomposition."""

    def __init__(self, step: int, residual: float):
        super().__init__(
            f"DECOMPOSE failed at source {step}: least-squares residual {residual:.3e}"
        )
        self.step = step
        self.residual = residual


class ConstructionError(FusionNumericalError):
    """A requested synthetic construction is infeasible."""
    pass


class FileFormatError(FusionError):
    """An input file is missing, unreadable or not valid JSON."""
    exit_code = 64
