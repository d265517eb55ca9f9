"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
MissingPrerequisiteError -> 3, NumericalError (and diffcore's
NonFiniteError/NonFiniteGradError) -> 4.
"""


class GemlocError(Exception):
    pass


class ConfigError(GemlocError):
    pass


class MissingPrerequisiteError(GemlocError):
    pass


class NumericalError(GemlocError):
    pass


class GeometryError(GemlocError):
    pass


class DataError(GemlocError):
    pass


class DataAccessError(DataError):
    """A modality was read that the active access policy forbids."""
