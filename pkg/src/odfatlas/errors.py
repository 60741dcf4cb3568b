"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`OdfAtlasError`.
The CLI maps the two families below onto exit codes (validation -> 3,
numerical -> 4).
"""


class OdfAtlasError(Exception):
    """Base class for package errors."""


class ValidationError(OdfAtlasError, ValueError):
    """Input violates a documented precondition or invariant."""


class InvalidArgumentError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed binary container; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(OdfAtlasError, ArithmeticError):
    """A computation left its domain of validity."""


class DomainError(NumericalError):
    pass


class DegenerateInputError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None, index=None):
        super().__init__(message)
        self.residual = residual
        self.index = index


class FlowInstabilityError(NumericalError):
    def __init__(self, message, timestep=None):
        super().__init__(message)
        self.timestep = timestep


class FoldedMapError(NumericalError):
    def __init__(self, message, voxel=None):
        super().__init__(message)
        self.voxel = voxel


class StepSizeError(NumericalError):
    pass
