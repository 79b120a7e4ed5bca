"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration or usage input. Maps to CLI exit code 1."""


class DivergedRunError(RuntimeError):
    """An operation was requested on a diverged (non-finite loss) run."""
