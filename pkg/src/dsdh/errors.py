"""Exception hierarchy shared across the package."""


class DSDHError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(DSDHError, ValueError):
    """An argument violates a documented precondition."""


class NonFiniteLossError(DSDHError, FloatingPointError):
    """A loss evaluated to NaN or infinity."""


class IntegrityError(DSDHError):
    """A serialized container is truncated, corrupted, or has a bad version."""


class ConfigError(DSDHError, ValueError):
    """A configuration file or mapping is malformed."""


class CheckpointMismatchError(DSDHError):
    """A checkpoint does not fit the architecture it is loaded into."""
