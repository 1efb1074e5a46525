"""Exception hierarchy for the padapt package.

Every error raised deliberately by the library derives from PadaptError so
callers (and the CLI) can distinguish contract violations from genuine bugs.
"""


class PadaptError(Exception):
    """Base class for all padapt errors."""


class ShapeError(PadaptError):
    """Operand shapes or ranks are incompatible with the requested operation."""


class DomainError(PadaptError):
    """Input values fall outside the mathematical domain of the operation."""


class ContractError(PadaptError):
    """A documented precondition of an API call was violated."""


class CompatibilityError(PadaptError):
    """Artifacts (padding, checkpoint, config) do not belong together."""


class FormatError(PadaptError):
    """A serialized artifact is malformed, truncated, or has a bad header."""


class NumericError(PadaptError):
    """A computation produced NaN/Inf or otherwise diverged."""


class ConfigError(PadaptError):
    """A configuration object is internally inconsistent."""


class DataError(PadaptError):
    """Dataset ingest or manifest integrity failure."""
