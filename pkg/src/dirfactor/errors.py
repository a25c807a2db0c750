"""Exception hierarchy.

The CLI maps these onto exit codes: ``UsageError`` -> 1, ``DataError`` -> 2,
``NumericalError`` -> 3.
"""


class DirFactorError(Exception):
    exit_code = 1


class UsageError(DirFactorError):
    exit_code = 1


class DataError(DirFactorError, ValueError):
    exit_code = 2


class ParseError(DataError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class CovariateError(DataError):
    pass


class NumericalError(DirFactorError, ArithmeticError):
    exit_code = 3


class DegenerateSampleError(NumericalError):
    """A sample whose composition is undefined (all latent scores <= 0)."""


class DegenerateVarianceError(NumericalError):
    pass


class SliceSamplerError(NumericalError):
    """Slice sampler exceeded its step budget; ``dump`` holds the offending state."""

    def __init__(self, message, dump=None):
        self.dump = dump or {}
        super().__init__(message)
