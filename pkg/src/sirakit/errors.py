"""Exception hierarchy shared across the toolkit."""


class SiraError(Exception):
    """Base class for domain errors raised by this package."""


class ParseError(SiraError):
    """Malformed input file. Carries the path and 1-based line number."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class CoverageError(SiraError):
    """A location falls outside the atmospheric grid coverage."""


class FactorizationError(SiraError):
    """Covariance factorization failed even after jitter escalation."""


class ConfigError(SiraError):
    """Invalid or unknown run configuration."""
