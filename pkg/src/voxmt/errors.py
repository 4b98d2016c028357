"""Exception types shared by every stage of the pipeline.

The CLI maps ``InputError`` to exit code 1 and ``ConfigError`` to exit code 2.
"""


class VoxmtError(Exception):
    """Base class for all package errors."""


class InputError(VoxmtError, ValueError):
    """Malformed or out-of-contract input data."""


class ConfigError(VoxmtError, ValueError):
    """Inconsistent configuration, weight shapes or missing weights."""


class InternalError(VoxmtError, RuntimeError):
    """Broken invariant between internal stages (e.g. misaligned rows)."""
