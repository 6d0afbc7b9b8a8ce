"""Exception types shared across the package."""


class HDMILabError(Exception):
    """Base class for all errors raised by hdmi_lab."""


class ShapeError(HDMILabError, ValueError):
    """Array dimensions do not agree."""


class DomainError(HDMILabError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ConfigError(HDMILabError, ValueError):
    """Invalid or inconsistent configuration."""


class IngestionError(HDMILabError, ValueError):
    """A data file could not be parsed or failed validation."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
