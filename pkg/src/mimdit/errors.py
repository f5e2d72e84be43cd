"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: contract-family errors (dimension,
parameter, configuration, contract, persistence) exit 1, numerical
failures exit 2.
"""


class MimError(Exception):
    """Base class for all package errors."""


class DimensionError(MimError):
    """Tensor shapes or extents are inconsistent for the requested operation."""


class ParameterError(MimError):
    """A scalar argument is outside its documented range."""


class ConfigurationError(MimError):
    """A configuration record is internally inconsistent."""


class ContractError(MimError):
    """A structural contract was violated (segment drift, config mismatch)."""


class PersistenceError(MimError):
    """File I/O or on-disk format failure. Carries the offending path when known."""


class NumericalFailureError(MimError):
    """Non-finite values encountered. Carries the step index when known."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
