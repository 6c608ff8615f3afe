"""Exception hierarchy shared by every module."""


class PrivFedError(Exception):
    """Base class for all package errors."""


class ShapeError(PrivFedError, ValueError):
    pass


class ParameterError(PrivFedError, ValueError):
    pass


class StateError(PrivFedError, RuntimeError):
    pass


class LabelIndexError(PrivFedError, IndexError):
    pass


class ParseError(PrivFedError, ValueError):
    """Malformed input row; message names file and line."""


class SchemaError(PrivFedError, ValueError):
    pass


class AccountingError(PrivFedError, ValueError):
    pass


class CalibrationError(PrivFedError, ValueError):
    pass


class MetricError(PrivFedError, ValueError):
    pass


class ConfigError(PrivFedError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
