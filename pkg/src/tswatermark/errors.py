"""Exception hierarchy shared by every module."""


class WatermarkError(Exception):
    """Base class for all package errors."""


class ConfigurationError(WatermarkError, ValueError):
    pass


class InputError(WatermarkError, ValueError):
    pass


class UsageError(WatermarkError, RuntimeError):
    pass


class NumericError(WatermarkError, ArithmeticError):
    pass


class TrainingAborted(WatermarkError, RuntimeError):
    pass


class FitError(WatermarkError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
