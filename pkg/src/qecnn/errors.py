"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class QecnnError(Exception):
    exit_code = 1


class ValidationError(QecnnError, ValueError):
    exit_code = 2


class FormatError(QecnnError, ValueError):
    exit_code = 3


class ConfigurationError(QecnnError, ValueError):
    exit_code = 4


class UndefinedMetricError(QecnnError, ValueError):
    exit_code = 2
