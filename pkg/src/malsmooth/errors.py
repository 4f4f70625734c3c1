"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class MalsmoothError(Exception):
    exit_code = 5


class UsageError(MalsmoothError, ValueError):
    exit_code = 2


class ConfigError(UsageError):
    """Invalid configuration. ``key`` names the offending ``section.key`` when known."""

    def __init__(self, message, key=None):
        self.key = key
        if key:
            message = f"{key}: {message}"
        super().__init__(message)


class DimensionError(UsageError):
    pass


class FormatError(MalsmoothError):
    exit_code = 3


class IntegrityError(FormatError):
    pass


class ConfigMismatchError(FormatError):
    pass


class FeasibilityError(MalsmoothError):
    exit_code = 4


class InvariantError(MalsmoothError):
    exit_code = 5
