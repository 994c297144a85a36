"""Exporter-side failures."""


class ExporterError(Exception):
    """Base class for expected exporter failures."""


class ConfigError(ExporterError):
    """A configuration value is inconsistent with the model or data."""
