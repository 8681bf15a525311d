"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: usage and configuration problems exit 2,
numeric failures exit 3. Library code raises, never exits.
"""


class AdwmError(Exception):
    """Base class for all package errors."""


class DimensionError(AdwmError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateSampleError(AdwmError):
    """Too few samples for a statistic (covariance needs m >= 2)."""


class ConfigurationError(AdwmError):
    """Invalid configuration value or inconsistent config combination."""


class FormatError(AdwmError):
    """Malformed binary file. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(AdwmError):
    """Numerical failure: divergence, non-convergence, NaN loss."""


class UsageError(AdwmError):
    """API misuse, e.g. calling backward on a non-scalar tensor."""
