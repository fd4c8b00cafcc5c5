"""Exception hierarchy.  The CLI maps each family to its own exit status."""


class LacarError(Exception):
    """Base class for all package errors."""


class ParseError(LacarError):
    """Malformed input file.  Carries the offending path and line when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ModelError(LacarError):
    """The model specification or data violate a precondition."""


class IsolatedAreaError(ModelError):
    """An area has no active neighbours while rho is fixed near one."""

    def __init__(self, area, rho):
        self.area = int(area)
        self.rho = float(rho)
        super().__init__(
            f"area {self.area} has no active neighbours; its full conditional is "
            f"degenerate with rho fixed at {self.rho:g}"
        )


class NumericalError(LacarError):
    """Factorization failure, non-convergence or total underflow."""


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, column):
        self.column = int(column)
        super().__init__(f"matrix is not positive definite (pivot {self.column})")


class ConvergenceError(NumericalError):
    pass


class UndefinedStatistic(LacarError, ValueError):
    """A statistic has a zero denominator (e.g. Moran's I of constant values)."""
