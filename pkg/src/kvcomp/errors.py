"""Exception hierarchy shared by all kvcomp modules."""


class KvCompError(Exception):
    """Base class for every error raised by kvcomp."""


class InvalidArgumentError(KvCompError, ValueError):
    pass


class ShapeMismatchError(KvCompError, ValueError):
    pass


class FormatError(KvCompError):
    """Base class for KVT1 / CKV1 parse failures."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    def __init__(self, expected: int, actual: int, what: str = "payload"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class CorruptionError(FormatError):
    """Internally inconsistent data (bitmap/payload/level-table mismatch)."""


class StateMachineError(KvCompError):
    """Quantization-unit operation invoked in the wrong scheduler state."""


class OrderingError(KvCompError):
    """Decode tokens observed out of order."""


class EvaluatorError(KvCompError):
    """External quality evaluator failed (timeout, exit status, bad output)."""


class InfeasibleError(KvCompError):
    """Bit-width search could not meet its quality budget."""

    def __init__(self, message: str, sweep=None):
        super().__init__(message)
        self.sweep = sweep
