"""Exception hierarchy. The CLI maps these onto exit codes."""


class CalibError(Exception):
    pass


class InputError(CalibError, ValueError):
    """Malformed or mismatched input (shapes, lengths, non-finite values)."""


class DomainError(CalibError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConfigError(CalibError):
    """Invalid experiment configuration or empty split."""


class NumericError(CalibError, ArithmeticError):
    """Optimization or training produced non-finite values."""


class TrainingError(NumericError):
    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch
