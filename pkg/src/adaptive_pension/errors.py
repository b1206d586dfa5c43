"""Exception types raised across the package."""


class PensionError(Exception):
    """Base class for all package errors."""


class ConfigError(PensionError):
    """Invalid or unparsable configuration; carries an optional section and line."""

    def __init__(self, message, section=None, line=None):
        self.section = section
        self.line = line
        where = []
        if section:
            where.append(f"section '{section}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class InfeasibleConstraints(PensionError):
    pass


class NonPSDCovariance(PensionError):
    pass


class AgeOutOfRange(PensionError):
    pass


class NonIdentifiable(PensionError):
    def __init__(self, message, coefficients=()):
        self.coefficients = tuple(coefficients)
        super().__init__(message)


class EmptyBin(PensionError):
    pass


class UnknownBin(PensionError):
    pass


class PayoutOutOfRange(PensionError):
    pass


class DivisionByZero(PensionError, ArithmeticError):
    """Cash formula denominator (1 - m)(1 + w'a) is not positive."""


class NonpositiveInitialLiabilities(PensionError):
    pass


class EvaluationFailure(PensionError):
    pass


class SchemaError(PensionError):
    """File or artifact written under an unsupported schema version."""
