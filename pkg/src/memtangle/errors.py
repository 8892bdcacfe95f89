"""Exception hierarchy.

Every error carries the CLI exit code it maps to, so the front-end can
translate library failures without a lookup table:

    2  configuration / validation
    3  data / dimension
    4  numeric
    5  incomplete input
"""
from __future__ import annotations


class MemtangleError(Exception):
    exit_code = 1


class ConfigError(MemtangleError, ValueError):
    """Invalid configuration value; the message names the offending field(s)."""

    exit_code = 2


class ValidationError(MemtangleError, ValueError):
    exit_code = 2


class DataError(MemtangleError):
    exit_code = 3


class DimensionMismatchError(DataError, ValueError):
    pass


class FormatError(DataError):
    """Base class for malformed dataset / checkpoint files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class CaptionEncodingError(FormatError):
    pass


class OverContaminatedSplitError(DataError):
    pass


class EmptyPairSetError(DataError):
    pass


class NumericError(MemtangleError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(NumericError, ValueError):
    """Input for which the quantity is undefined (constant vector, zero norm)."""


class IncompleteInputError(MemtangleError):
    exit_code = 5
