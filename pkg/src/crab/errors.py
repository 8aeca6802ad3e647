"""Exception taxonomy shared by all modules.

The CLI maps these onto stable exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, NumericError -> 4.
"""


class CrabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CrabError):
    """Operand dimensions are inconsistent with the operation's contract."""


class ContractError(CrabError):
    """A precondition was violated (non-scalar backward seed, bad mask, ...)."""


class DomainError(CrabError):
    """Input outside the mathematical domain of the operation (e.g. log of <= 0)."""


class DegenerateInputError(CrabError):
    """Structurally valid input with no usable content (e.g. fully masked row)."""


class NumericError(CrabError):
    """A computation produced NaN/Inf, or training hit a non-finite loss."""


class ConfigError(CrabError):
    """Invalid or inconsistent run configuration."""


class DataError(CrabError):
    """Problem reading or interpreting dataset files."""


class FormatError(DataError):
    """Malformed binary feature shard or checkpoint blob."""
