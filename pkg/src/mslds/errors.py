"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
NumericalError exits 3.
"""


class DataError(Exception):
    """Malformed or inconsistent input data (files, shapes, dimensions)."""


class NumericalError(Exception):
    """A computation left the representable or stable regime."""


class InvalidParamsError(DataError):
    """Model parameters violate a structural invariant."""
