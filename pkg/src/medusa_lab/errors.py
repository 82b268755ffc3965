"""Exception types raised across the lab."""


class LabError(Exception):
    """Base class for every error raised by medusa_lab."""


class ContractError(LabError, ValueError):
    """A precondition of a public operation was violated."""


class DegenerateVectorError(ContractError):
    """A vector that must have nonzero norm did not."""


class UnsupportedPrimitiveError(LabError):
    """A tape primitive lacks the rule needed for the requested pass."""


class IngestionError(ContractError):
    def __init__(self, token, message=None):
        self.token = token
        super().__init__(message or f"token {token!r} is not in the vocabulary")


class TrainingDivergedError(LabError):
    def __init__(self, accuracy, threshold):
        self.accuracy = accuracy
        self.threshold = threshold
        super().__init__(
            f"held-out accuracy {accuracy:.4f} below required {threshold:.2f}"
        )


class ParseError(LabError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class ShapeMismatchError(ParseError):
    pass


class ConfigError(LabError):
    """Invalid or unknown configuration."""


class StageError(LabError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
