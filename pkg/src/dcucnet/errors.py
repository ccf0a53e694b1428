"""Exception hierarchy shared across the package."""


class DcucError(Exception):
    """Base class for all package errors."""


class InvalidInput(DcucError, ValueError):
    pass


class ShapeError(DcucError, ValueError):
    pass


class ConfigMismatch(DcucError, ValueError):
    pass


class SynthesisError(DcucError, RuntimeError):
    """Overlap-add compensation denominator vanished inside the kept region."""


class FormatError(DcucError, ValueError):
    """A WAV, DVID or checkpoint file is malformed or uses an unsupported encoding."""


class ChecksumError(FormatError):
    pass


class NondeterminismError(DcucError, RuntimeError):
    pass


class TrainingDiverged(DcucError, RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class ConfigError(DcucError, ValueError):
    """Bad key=value configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
