"""Exception types raised across the package."""


class CodedError(Exception):
    """Base class for all errors raised by codedml."""


class InvalidParameter(CodedError, ValueError):
    pass


class InsufficientResults(CodedError):
    """Fewer task results than the code needs to decode."""


class IllConditionedCode(CodedError):
    """A decoding subsystem is singular or too badly conditioned to trust."""


class UnsupportedDistribution(CodedError, TypeError):
    pass


class JobTimeout(CodedError, TimeoutError):
    """No decodable set of results arrived before the deadline."""


class ProtocolError(CodedError):
    """Malformed or unexpected wire frame."""


class StepTooLarge(CodedError, ArithmeticError):
    """Gradient descent iterate blew up; the step size is too large."""


class InvalidState(CodedError, ValueError):
    """Shuffle state violates its cache/partition invariants."""


class PlanInconsistency(CodedError):
    """A shuffle message term cannot be cancelled from the worker's cache."""
