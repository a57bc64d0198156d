"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: FormatError/ConfigError -> 2,
DomainError -> 3.
"""


class PerfkitError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PerfkitError):
    """Malformed input file or wire format (bad header, bad schema, ...)."""


class ConfigError(PerfkitError):
    """Invalid configuration value or unknown option/feature name."""


class DomainError(PerfkitError):
    """Input violates an operation's precondition or a type invariant."""
