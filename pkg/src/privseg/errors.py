"""Exception taxonomy shared across the toolkit.

The CLI maps these onto stable exit codes: config errors exit 2, data
errors exit 3, numeric failures exit 4.
"""


class ToolkitError(Exception):
    """Base class for all privseg errors."""


class ConfigError(ToolkitError):
    """Invalid or inconsistent run configuration."""


class DataError(ToolkitError):
    """Missing, malformed, or contract-violating data on disk or in memory."""


class NumericError(ToolkitError):
    """Non-finite loss or weights encountered during training."""
