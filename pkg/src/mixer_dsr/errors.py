"""Exceptions shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration, detected before any compute."""


class TrainingAborted(RuntimeError):
    """Training hit repeated non-finite losses and stopped."""
