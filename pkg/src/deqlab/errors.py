"""Exception hierarchy shared by every deqlab module."""


class DeqlabError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""

    exit_code = 2


class ConfigError(DeqlabError):
    exit_code = 1


class InvalidNodes(DeqlabError, ValueError):
    pass


class InvalidOrder(DeqlabError, ValueError):
    pass


class NotPSD(DeqlabError, ValueError):
    pass


class NotSymmetric(DeqlabError, ValueError):
    pass


class DimensionMismatch(DeqlabError, ValueError):
    pass


class DimensionTooSmall(DeqlabError, ValueError):
    pass


class NoConvergence(DeqlabError, RuntimeError):
    pass


class AssumptionViolated(DeqlabError, ValueError):
    pass


class DivergentNTK(DeqlabError, ArithmeticError):
    pass


class CholeskyFailure(DeqlabError, ArithmeticError):
    pass


class DepthInsufficient(DeqlabError, ValueError):
    pass


class ParseError(DeqlabError, ValueError):
    exit_code = 1

    def __init__(self, message, row=None, column=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.column = column


class RaggedRows(ParseError):
    pass


class SizeGuard(DeqlabError, ValueError):
    pass


class OutOfMemory(DeqlabError, MemoryError):
    pass
