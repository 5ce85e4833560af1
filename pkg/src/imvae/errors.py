"""Exception hierarchy shared by the pipeline stages."""


class IMVAEError(Exception):
    """Base class for all pipeline failures."""

    exit_code = 1


class ConfigError(IMVAEError, ValueError):
    exit_code = 2


class DataError(IMVAEError, ValueError):
    """Raised when input data cannot support the requested operation."""

    exit_code = 2


class MissingArtifactError(IMVAEError, FileNotFoundError):
    exit_code = 3


class NumericalError(IMVAEError, FloatingPointError):
    """Non-finite values appeared in a loss, embedding or parameter."""

    exit_code = 4
