"""Exception taxonomy shared by every module.

Exit-code mapping used by the CLI: 2 config error, 3 data error,
4 numeric failure, 5 I/O.
"""


class ConceptMarkError(Exception):
    exit_code = 1


class ConfigError(ConceptMarkError):
    exit_code = 2


class DataError(ConceptMarkError):
    exit_code = 3


class NumericError(ConceptMarkError):
    exit_code = 4


class IoError(ConceptMarkError):
    exit_code = 5


# registry
class DuplicateToken(DataError):
    pass


class SecretCollision(DataError):
    pass


class BadLength(ConfigError):
    pass


class UnknownConcept(DataError):
    pass


class IndexOutOfRange(ConfigError):
    pass


class SchemaVersionMismatch(DataError):
    pass


class IntegrityError(DataError):
    pass


class ParseError(DataError):
    pass


class TargetNotInPrompt(DataError):
    pass


# tensor plumbing
class DimensionMismatch(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class LengthMismatch(ConfigError):
    pass


class ZeroVector(ConfigError):
    pass


class UnknownTargetPosition(DataError):
    pass


class NonPositiveAlpha(ConfigError):
    pass


class EmptyPrompt(ConfigError):
    pass


class InvalidParameter(ConfigError):
    pass


class InsufficientData(DataError):
    pass


class BackboneFailure(NumericError):
    pass


# training / generation
class DivergenceDetected(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class ConceptAlreadyTrained(DataError):
    pass
