"""Exception classes.

Three families map onto distinct CLI exit codes: input parsing problems,
violated preconditions, and numerical failures.
"""


class LandmarkMaxentError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(LandmarkMaxentError):
    """Malformed input that could not be parsed."""

    exit_code = 2


class ParseError(InputError):
    """A row or field could not be parsed.

    Attributes
    ----------
    row : int or None
        1-based line number in the source file, when known.
    """

    def __init__(self, msg, row=None):
        super().__init__(msg if row is None else f"row {row}: {msg}")
        self.row = row


class SchemaError(ParseError):
    """Input has the wrong shape (column count, dimension)."""


class PreconditionError(LandmarkMaxentError):
    """Inputs are well formed but violate an operation's requirements."""

    exit_code = 3


class CapabilityError(PreconditionError):
    """Request exceeds what an exact method supports (size caps, memory)."""


class ConstraintViolationError(PreconditionError):
    """A vector violates the stored linear constraints beyond tolerance.

    Attributes
    ----------
    index : int
        Row index of the worst offending vector.
    violation : float
        Its largest absolute constraint residual.
    """

    def __init__(self, msg, index=None, violation=None):
        super().__init__(msg)
        self.index = index
        self.violation = violation


class NumericalError(LandmarkMaxentError):
    """A computation failed numerically."""

    exit_code = 4


class NonPSDError(NumericalError):
    """A covariance matrix has a significantly negative eigenvalue."""


class DivergenceError(NumericalError):
    """Training ran away. ``trace`` holds the history up to the abort."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace
