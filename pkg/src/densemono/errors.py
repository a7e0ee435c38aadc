"""Exception types raised across the package.

Every error carries a short class name that the CLI prints on failure, so
callers can match on the type rather than on message text.
"""


class SlamError(Exception):
    """Base class for all errors raised by densemono."""


# geometry
class NonPositiveDepth(SlamError, ValueError):
    pass


class OutOfBounds(SlamError, ValueError):
    pass


# dataset / io
class MissingFile(SlamError, FileNotFoundError):
    pass


class MalformedLine(SlamError, ValueError):
    def __init__(self, line_number: int, message: str = ""):
        self.line_number = line_number
        text = f"malformed line {line_number}"
        if message:
            text += f": {message}"
        super().__init__(text)


class UnsupportedFormat(SlamError, ValueError):
    pass


class IoError(SlamError, OSError):
    pass


# predictions
class MissingPrediction(SlamError, FileNotFoundError):
    pass


class InvalidPrediction(SlamError, ValueError):
    pass


class NonPositiveFocal(SlamError, ValueError):
    pass


# tracking / refinement
class TrackingLost(SlamError, RuntimeError):
    pass


class DegenerateBaseline(SlamError, ValueError):
    pass


class AmbiguousMatch(SlamError, ValueError):
    pass


# pose graph
class NotConnected(SlamError, ValueError):
    pass


class SingularSystem(SlamError, ArithmeticError):
    pass


# model / evaluation
class UnlabeledElement(SlamError, ValueError):
    pass


class EmptyModel(SlamError, ValueError):
    pass


class InsufficientPairs(SlamError, ValueError):
    pass


class NoGroundTruth(SlamError, ValueError):
    pass


class ConfigError(SlamError, ValueError):
    pass
