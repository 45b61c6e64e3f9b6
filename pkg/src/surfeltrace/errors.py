"""Exception types shared across the package.

Exit-code mapping used by the CLI: InvalidInputError -> 2,
NumericFailure -> 3, FormatError -> 4.
"""


class InvalidInputError(ValueError):
    """Caller passed arguments violating a documented precondition."""


class NumericFailure(RuntimeError):
    """A numeric invariant broke (non-finite loss, diverged optimization)."""


class FormatError(IOError):
    """A file does not conform to one of the package's formats."""


class GenerationError(RuntimeError):
    """Synthetic scene/dataset generation could not satisfy its contract."""
