class KgForgeError(Exception):
    """Base class for every error raised by kgforge."""


class ConfigError(KgForgeError, ValueError):
    """A configuration document is missing a field or holds an invalid value."""

    def __init__(self, message: str, field: str = None):
        super().__init__(message)
        self.field = field


class StoreStateError(KgForgeError, RuntimeError):
    """Store used in the wrong phase (write after seal, read before seal)."""


class EntityNotFoundError(KgForgeError, LookupError):
    def __init__(self, key, message: str = None):
        super().__init__(message or f"Unknown entity: {key!r}")
        self.key = key


class IdOutOfRangeError(KgForgeError, IndexError):
    """One or more ids of a triple fall outside the model's vocabulary."""

    def __init__(self, failed, message: str = None):
        names = ", ".join(f"{slot}={value}" for slot, value in failed)
        super().__init__(message or f"Id out of range: {names}")
        self.failed = list(failed)


class EmptyViewError(KgForgeError, ValueError):
    pass


class SplitError(KgForgeError, ValueError):
    pass


class NegativeSamplingError(KgForgeError, RuntimeError):
    pass


class MemoryBudgetError(KgForgeError, MemoryError):
    def __init__(self, message: str, bucket=None):
        super().__init__(message)
        self.bucket = bucket


class FormatError(KgForgeError, ValueError):
    """A binary artifact is malformed; ``offset`` is where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IndexBuildError(KgForgeError, ValueError):
    pass


class CalibrationError(KgForgeError, ValueError):
    pass


class StaleMentionError(KgForgeError, LookupError):
    pass


class CandidateError(KgForgeError, ValueError):
    pass


class CorruptStateError(KgForgeError, ValueError):
    pass
