"""Exception hierarchy shared by all sarcon modules."""


class SarconError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SarconError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(SarconError):
    """An argument violates an operation's precondition."""


class NumericFaultError(SarconError):
    """A forward computation produced NaN/Inf or overflowed."""


class FormatError(SarconError):
    """A file or byte stream does not match its documented format."""


class DataError(SarconError):
    """Dataset content is structurally valid but semantically unusable."""


class UninitializedStatsError(ContractError):
    """Inference-mode normalization requested before any running-statistic update."""
