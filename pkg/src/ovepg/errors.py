"""Exception types raised across the package."""


class OvePGError(Exception):
    """Base class for all package errors."""


class InvalidArgument(OvePGError, ValueError):
    pass


class InvalidLabels(InvalidArgument):
    pass


class ShapeError(InvalidArgument):
    pass


class DegenerateInput(InvalidArgument):
    pass


class NoSuchParam(InvalidArgument, KeyError):
    pass


class MalformedDataset(InvalidArgument):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class NotPositiveDefinite(OvePGError, ArithmeticError):
    pass


class NumericalBreakdown(OvePGError, ArithmeticError):
    pass


class Divergence(OvePGError, ArithmeticError):
    pass


class ChainError(OvePGError):
    """A sampler failure inside a specific Gibbs chain."""

    def __init__(self, chain, cause):
        super().__init__(f"chain {chain}: {cause}")
        self.chain = chain
        self.cause = cause
