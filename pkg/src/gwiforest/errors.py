"""Exception types shared across the package.

The CLI maps these onto distinct exit codes; library callers can catch them
individually.
"""


class GwiError(Exception):
    """Base class for package errors."""


class LawError(GwiError):
    """Malformed or infeasible offspring/immigration law."""


class ConfigError(GwiError):
    """Invalid configuration, CLI arguments, or file schema."""


class ResourceLimitError(GwiError):
    """A configured resource budget (vertex count, memory) was exceeded."""


class HorizonError(GwiError):
    """A requested index or level lies beyond the simulated horizon."""


class ViolationError(GwiError):
    """A structural invariant or exact identity failed on concrete data."""
