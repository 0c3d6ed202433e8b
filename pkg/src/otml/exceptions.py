"""Exception hierarchy shared by every otml module."""


class OtmlError(Exception):
    """Base class for all errors raised by otml."""


class DimensionError(OtmlError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(OtmlError, ValueError):
    """An operation was evaluated outside its mathematical domain."""


class NumericalError(OtmlError, ArithmeticError):
    """A NaN or infinity was produced; ``op`` names the offending operation."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class GraphError(OtmlError, RuntimeError):
    """Misuse of the differentiation graph (stale root, non-scalar root, ...)."""


class BatchSizeError(OtmlError, ValueError):
    """A batch statistic was requested on too few rows."""


class ConfigurationError(OtmlError, ValueError):
    """Invalid hyperparameters or geometry."""


class DegenerateFeatureError(OtmlError, ValueError):
    """A feature row has zero norm, so its cosine similarity is undefined."""


class ContractError(OtmlError, ValueError):
    """An input violated a documented precondition."""


class ConvergenceError(OtmlError, RuntimeError):
    """Sinkhorn did not reach the requested marginal tolerance.

    The best plan found is kept on ``plan`` for diagnostics.
    """

    def __init__(self, message, plan=None):
        super().__init__(message)
        self.plan = plan


class SubsetError(OtmlError, ValueError):
    """A label fraction leaves some class without a training sample."""


class DegenerateInputError(OtmlError, ValueError):
    """Input lacks the variety required by a statistic (e.g. one class only)."""


class FormatError(OtmlError, ValueError):
    """A persisted file (PGM, checkpoint, config, problem file) is malformed."""


class HeaderError(FormatError):
    """Bad magic number or unparsable header."""


class CorruptPayloadError(FormatError):
    """Payload is truncated or its length disagrees with the header."""


class VersionError(FormatError):
    """The file was written by an unsupported format version."""


class ConfigError(FormatError):
    """Config text could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
