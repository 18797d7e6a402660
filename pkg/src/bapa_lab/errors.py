"""Exception hierarchy shared by every module.

Each class maps to a distinct CLI exit code (see ``bapa_lab.cli``).
"""


class LabError(Exception):
    """Base class for all errors raised by bapa_lab."""

    exit_code = 1


class ShapeError(LabError, ValueError):
    exit_code = 3


class DegenerateInputError(LabError, ValueError):
    """Zero-norm vectors and similar inputs with no meaningful answer."""

    exit_code = 3


class ConfigError(LabError, ValueError):
    exit_code = 4


class SchemeError(ConfigError):
    """Unknown position-scheme name."""

    exit_code = 5


class FormatError(LabError):
    """Corrupt file, unknown container version or tampered manifest."""

    exit_code = 6


class DatasetMismatchError(LabError):
    """Two reports or a report and a dataset disagree on the dataset hash."""

    exit_code = 7
