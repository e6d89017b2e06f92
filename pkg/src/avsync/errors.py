"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``avsync.cli``).
"""


class AvsyncError(Exception):
    """Base class for all package errors."""


class ShapeError(AvsyncError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(AvsyncError, ValueError):
    """A precondition of an operation was violated (e.g. non-scalar loss)."""


class ConfigError(AvsyncError, ValueError):
    """Invalid or inconsistent configuration."""


class CapacityError(ConfigError):
    """A sequence is longer than a learned encoding table can index."""


class DataError(AvsyncError):
    """Missing, malformed or too-short data on disk or in memory."""


class ProtocolError(DataError):
    """A clip cannot be evaluated under the requested offset protocol."""


class SamplingError(DataError):
    """A batch cannot be sampled from the given source."""


class NumericError(AvsyncError, ArithmeticError):
    """A non-finite loss or score was produced."""


class UnsupportedVariantError(ConfigError):
    """The requested operation does not exist for this model variant."""
