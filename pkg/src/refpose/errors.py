"""Exception types shared across the package.

Input problems derive from :class:`InvalidInputError` (CLI exit code 2);
numerical breakdowns derive from :class:`NumericalFailure` (exit code 3).
"""


class InvalidInputError(ValueError):
    pass


class FormatError(InvalidInputError):
    pass


class PlyParseError(FormatError):
    def __init__(self, message, offset=None):
        self.detail = message
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProjectionDomainError(InvalidInputError):
    pass


class MetricDomainError(InvalidInputError):
    pass


class NumericalFailure(ArithmeticError):
    pass


class DegenerateFitError(NumericalFailure):
    pass


class DegeneratePriorError(NumericalFailure):
    pass


class DegenerateGeometryError(NumericalFailure):
    pass


class InsufficientCorrespondencesError(NumericalFailure):
    def __init__(self, count, needed=3):
        super().__init__(f"insufficient correspondences: {count} < {needed}")
        self.count = count


class RegistrationFailure(NumericalFailure):
    pass
