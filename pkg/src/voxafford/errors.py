"""Exception hierarchy shared by every module."""


class VoxAffordError(Exception):
    """Base class for all package errors."""


class DimensionError(VoxAffordError, ValueError):
    pass


class NumericError(VoxAffordError, ArithmeticError):
    pass


class InputError(VoxAffordError, ValueError):
    pass


class ContractError(VoxAffordError, ValueError):
    pass


class ConfigError(VoxAffordError, ValueError):
    pass


class EvaluationError(VoxAffordError, ValueError):
    pass


class GenerationError(VoxAffordError, ValueError):
    pass


class TrainingError(VoxAffordError, RuntimeError):
    pass


class CheckError(VoxAffordError, RuntimeError):
    pass


class ParseError(VoxAffordError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
