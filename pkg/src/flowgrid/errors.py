"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigError -> 2, FormatError (and I/O) -> 3,
NumericError -> 4.
"""


class FlowgridError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowgridError):
    """Invalid or unknown configuration keys/values."""


class FormatError(FlowgridError):
    """Base class for binary file-format errors."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File carries an unsupported format version."""


class TruncatedPayloadError(FormatError):
    """File ends before the declared payload is complete."""


class NonFiniteDataError(FormatError):
    """Payload contains NaN or infinite values."""


class NumericError(FlowgridError):
    """Numerical failure (non-finite loss/divergence) during computation."""
