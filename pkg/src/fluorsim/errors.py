"""Exception hierarchy used throughout the package."""


class FluorsimError(Exception):
    """Base class for all package errors."""


class DomainError(FluorsimError, ValueError):
    """Argument outside the mathematical domain of a formula."""


class ConfigError(FluorsimError, ValueError):
    """Invalid configuration; ``key_path`` names the offending entry."""

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class InputError(FluorsimError, ValueError):
    """Malformed measurement data passed to an operation."""


class NumericalError(FluorsimError, RuntimeError):
    """A numerical procedure failed (non-finite values, no convergence)."""


class EstimationError(NumericalError):
    """Parameter estimation failed; ``diagnostics`` holds the scan data."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
