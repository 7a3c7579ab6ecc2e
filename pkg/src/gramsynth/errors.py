"""Exception hierarchy shared by all modules.

Every error carries the CLI exit code it maps to, so the front end can translate
exceptions without a lookup table of its own.
"""


class GramsynthError(Exception):
    exit_code = 3


class ConfigError(GramsynthError):
    """Invalid configuration, schema violation or malformed input file."""

    exit_code = 2


class SchemaError(ConfigError):
    pass


class InconsistentDimensions(ConfigError):
    pass


class ExpressionSyntaxError(ConfigError):
    """Parse failure; ``offset`` is the byte offset into the source text."""

    def __init__(self, message, offset=None, text=None):
        self.offset = offset
        self.text = text
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class UnknownIdentifier(ExpressionSyntaxError):
    pass


class ArityError(ExpressionSyntaxError):
    pass


class NumericError(GramsynthError):
    exit_code = 3


class DomainError(NumericError):
    """A function was evaluated outside its domain (log of nonpositive, x/0, ...)."""


class NonFinite(NumericError):
    pass


class GridMismatch(NumericError):
    pass


class NotInRange(NumericError):
    """Target is not in the (numerical) range of the input-output operator."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class SingularGramian(NumericError):
    """The Gramian left the coercivity class (lambda_min below threshold)."""

    def __init__(self, message, lambda_min=None, lambda_max=None, iterate=None):
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max
        self.iterate = iterate
        super().__init__(message)


class UndefinedBound(NumericError):
    pass


class NotBaselineModel(NumericError):
    pass


class NotGeneralModel(NumericError):
    pass


class NotAdmissible(GramsynthError):
    exit_code = 4

    def __init__(self, message, window=None):
        self.window = window
        super().__init__(message)


class EmptyAdmissibleSet(NotAdmissible):
    pass


class NotConverged(GramsynthError):
    exit_code = 5

    def __init__(self, message, history=None):
        self.history = history
        super().__init__(message)


class MaxIterations(NotConverged):
    pass


class MaxOuterIterations(NotConverged):
    pass
