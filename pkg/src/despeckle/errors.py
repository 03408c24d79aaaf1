"""Exception types shared across the package.

The CLI maps these onto exit codes: config/usage problems -> 2,
data problems -> 3, numerical failures -> 4.
"""


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


class DataError(Exception):
    """Missing, undecodable, or inconsistent input data."""


class NumericsError(RuntimeError):
    """Non-finite loss or parameters during optimization."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
