"""Exception hierarchy.

The CLI maps these onto its stable exit codes: ``ConfigError`` -> 2,
``DataError`` and subclasses -> 3, ``DivergedError`` -> 4.
"""


class LtfuseError(Exception):
    pass


class ConfigError(LtfuseError, ValueError):
    """Invalid configuration or argument. ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class InvalidShapeError(LtfuseError, ValueError):
    pass


class InsufficientSamplesError(LtfuseError, ValueError):
    pass


class DataError(LtfuseError):
    pass


class MissingFeatureError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConflictError(DataError):
    pass


class FormatError(DataError):
    pass


class DivergedError(LtfuseError):
    """Raised when the training loss becomes non-finite.

    ``state`` carries the last parameter set whose loss was finite and
    ``epoch``/``step`` locate the failure.
    """

    def __init__(self, message, state=None, epoch=None, step=None):
        super().__init__(message)
        self.state = state
        self.epoch = epoch
        self.step = step
