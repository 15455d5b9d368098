"""Error taxonomy shared by every module, with CLI exit codes attached.

Categories map one-to-one onto process exit codes:
configuration errors exit 2, data/parse errors exit 3, numeric failures
exit 4.
"""


class EvexitError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(EvexitError):
    """Invalid configuration: bad shapes, bad flags, out-of-range settings."""

    exit_code = 2


class ContractViolation(ConfigurationError):
    """A caller broke an operation's precondition (programming error)."""


class InfeasibleBudgetError(ConfigurationError):
    """Requested compute budget is below the cheapest exit."""


class DataError(EvexitError):
    """Invalid data: bad labels, non-finite inputs, inconsistent records."""

    exit_code = 3


class ParseError(DataError):
    """A file could not be parsed; message names the offending offset/line."""


class VersionedFormatError(DataError):
    """A persisted file declares an unsupported format version."""


class NumericError(EvexitError):
    """A computation produced a non-finite or degenerate numeric result."""

    exit_code = 4


class DegenerateFusionError(NumericError):
    """Total conflict in evidence combination (normalizer ~ 0)."""
