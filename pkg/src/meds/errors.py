"""Exception hierarchy shared by all modules."""


class MedsError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(MedsError, ValueError):
    pass


class ContractError(MedsError, ValueError):
    """A precondition of an operation was violated by the caller."""


class UnknownClassError(MedsError, LookupError):
    pass


class InsufficientPoolError(MedsError):
    def __init__(self, class_id, needed, available):
        self.class_id = class_id
        self.needed = needed
        self.available = available
        super().__init__(
            f"anomaly pool for class {class_id} has {available} images, "
            f"{needed} needed to reach the target ratio"
        )


class UndefinedMetricError(MedsError, ValueError):
    pass


class FeatureFileError(MedsError):
    """Base class for binary file parse failures."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DimensionOverflowError(FeatureFileError):
    pass


class PhaseError(MedsError):
    """Wraps a failure inside one pipeline phase, tagging which one."""

    def __init__(self, phase, cause):
        self.phase = phase
        self.cause = cause
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
