"""Exception taxonomy shared by all modules.

Three failure classes matter to callers: bad inputs (caller error), malformed
files, and numerical breakdown. The CLI maps them to exit codes 2, 2 and 3.
"""


class InvalidInputError(ValueError):
    """Arguments violate a documented precondition (shape, range, label)."""


class DataFormatError(ValueError):
    """A file on disk is not in the expected binary/text format."""


class NumericalError(RuntimeError):
    """A numerical routine failed beyond recovery (e.g. Cholesky after ridging)."""
