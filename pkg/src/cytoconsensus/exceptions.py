"""Exception hierarchy shared across the package."""


class CytoConsensusError(Exception):
    """Base class for all package errors."""


class EmptyCaption(CytoConsensusError, ValueError):
    pass


class LexiconError(CytoConsensusError, ValueError):
    pass


class EndpointError(CytoConsensusError):
    """Base for failures talking to an inference endpoint."""

    def __init__(self, endpoint_id: str, message: str):
        super().__init__(f"[{endpoint_id}] {message}")
        self.endpoint_id = endpoint_id


class AuthMissing(EndpointError):
    pass


class NonRetryable(EndpointError):
    def __init__(self, endpoint_id: str, message: str, status_code: int | None = None):
        super().__init__(endpoint_id, message)
        self.status_code = status_code


class ExhaustedRetries(EndpointError):
    def __init__(self, endpoint_id: str, attempts: int, last_cause: BaseException | str):
        super().__init__(endpoint_id, f"gave up after {attempts} attempts: {last_cause}")
        self.attempts = attempts
        self.last_cause = last_cause


class EmptyInput(CytoConsensusError, ValueError):
    pass


class ConfigInvalid(CytoConsensusError, ValueError):
    pass


class ManifestHashMismatch(CytoConsensusError):
    pass


class ShardWriteFailure(CytoConsensusError, OSError):
    def __init__(self, path, cause: BaseException):
        super().__init__(f"failed to write shard {path}: {cause}")
        self.path = path
        self.cause = cause


class UnresolvablePlaceholder(CytoConsensusError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unresolvable placeholder"


class AllStreamsEmpty(CytoConsensusError, ValueError):
    pass


class InsufficientRaters(CytoConsensusError, ValueError):
    pass
