"""Exception hierarchy shared by every unirag module.

Each exception carries the CLI exit code it maps to, so the command layer
never needs its own translation table.
"""


class UniRagError(Exception):
    exit_code = 1


class ConfigError(UniRagError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class IntegrityError(UniRagError):
    exit_code = 3


class IoFailure(IntegrityError):
    pass


class ChecksumMismatch(IntegrityError):
    pass


class VersionMismatch(IntegrityError):
    pass


class ValidationError(UniRagError):
    exit_code = 4


class ZeroVector(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class UnsupportedStyle(ValidationError):
    pass


class EmptyBank(ValidationError):
    pass


class EmptyIndex(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class UnknownTruthId(ValidationError):
    pass


class EmptyQuery(ValidationError):
    pass


class StaleTape(ValidationError):
    pass


class NonFiniteLoss(ValidationError):
    pass


class BackendError(UniRagError):
    exit_code = 5


class ProviderUnavailable(BackendError):
    pass


class BackendUnavailable(BackendError):
    pass


class BackendRejected(BackendError):
    pass


class GenerationTimeout(BackendError):
    pass


class PipelineError(UniRagError):
    """Wraps a failure from one stage of the answer pipeline."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[stage={stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
