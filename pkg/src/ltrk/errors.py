"""Errors shared across configuration surfaces."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""
