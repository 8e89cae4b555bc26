"""Exception hierarchy shared by every forgetlab module."""


class ForgetLabError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(ForgetLabError):
    """An operation was called in a way that breaks its stated contract."""


class InvalidArgument(ForgetLabError, ValueError):
    """An argument value is outside the documented domain."""


class NumericalFailure(ForgetLabError):
    """A non-finite value appeared during computation.

    The message names the primitive or training step that produced it.
    """


class DegenerateTokenError(ForgetLabError):
    """Every scored token log-probability fell below the division floor."""


class DegenerateWeightError(ForgetLabError):
    """Sampling weights could not be formed (zero or non-finite inputs)."""


class CheckpointError(ForgetLabError):
    """A checkpoint file is malformed, truncated, or fails its checksum."""


class CorpusFormatError(ForgetLabError):
    """A corpus file is malformed; message includes the offending line."""


class ConfigError(ForgetLabError):
    """An experiment configuration is invalid or inconsistent."""
