"""Exception types shared across the library.

The CLI maps these onto its exit-code scheme: format/data problems exit
with 2, numerical aborts with 3.
"""


class SplatFieldsError(Exception):
    """Base class for all library errors."""


class FormatError(SplatFieldsError):
    """A file does not conform to an expected layout (bad header, missing property)."""


class DataError(SplatFieldsError):
    """A file parses but carries invalid values (non-finite entries, bad dims)."""


class EmptyFieldError(SplatFieldsError):
    """Octree sampling retained no cells: the probability field is degenerate."""


class NumericalError(SplatFieldsError):
    """Training or sampling hit a non-finite value and aborted."""
