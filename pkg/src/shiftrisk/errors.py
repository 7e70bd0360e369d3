"""Exception hierarchy.

`ShiftRiskError` is the base for everything raised deliberately by this
package.  `ValidationError` subclasses signal bad inputs or configuration
(CLI exit code 2); `NumericalError` subclasses signal failures arising during
estimation on valid inputs (CLI exit code 3).
"""


class ShiftRiskError(Exception):
    pass


class ValidationError(ShiftRiskError):
    pass


class SchemaError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class SpecValidationError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class LossDomainError(DomainError):
    pass


class MissingValueError(ValidationError):
    pass


class SampleMismatchError(ValidationError):
    pass


class NumericalError(ShiftRiskError):
    pass


class DegenerateFoldError(NumericalError):
    pass


class UndefinedGainError(NumericalError):
    pass
