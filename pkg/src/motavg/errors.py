"""Error taxonomy shared by the library and the CLI exit-code mapping."""

from __future__ import annotations

__all__ = [
    "DataError",
    "NumericError",
    "ResourceLimitError",
    "InsufficientDataError",
    "FitFailureError",
    "KernelValidationError",
    "MissingArtifactError",
    "DegenerateInputError",
    "InfeasibleScenarioError",
]


class DataError(RuntimeError):
    """Input data missing, insufficient, or over a resource limit (CLI exit 3)."""


class NumericError(RuntimeError):
    """A numerical validation or fit failed (CLI exit 4)."""


class ResourceLimitError(DataError):
    """Requested ensemble would exceed the configured memory cap."""


class InsufficientDataError(DataError):
    """Too few samples contribute to an estimate."""


class MissingArtifactError(DataError):
    """A required upstream output file is absent; message names the producer."""


class DegenerateInputError(DataError):
    """All outcomes of a conditional process have probability zero."""


class InfeasibleScenarioError(NumericError):
    """No searched operating point satisfies the stated constraint."""


class FitFailureError(NumericError):
    """Model fit residual exceeded its threshold."""


class KernelValidationError(NumericError):
    """Closed-form kernel disagrees with its quadrature oracle."""
