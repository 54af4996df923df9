"""Exception types raised across the package."""


class InvalidGeometryError(ValueError):
    """A box or side parameterization does not describe a valid solid."""


class OutOfBoxError(InvalidGeometryError):
    """A candidate point lies outside the box it is measured against."""


class InvalidInputError(ValueError):
    """Numeric input is malformed (wrong shape, NaN, Inf, out of range)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class SceneGenerationError(RuntimeError):
    """Scene layout could not be completed within the retry budget."""


class ConfigError(ValueError):
    """Run configuration failed validation."""


class FileFormatError(ValueError):
    """A data file could not be parsed.

    Carries the offending path and 1-based line number when known.
    """

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")
