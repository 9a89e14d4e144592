"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DiraError(Exception):
    exit_code = 1


class ConfigError(DiraError, ValueError):
    exit_code = 2


class DimensionError(DiraError, ValueError):
    exit_code = 3


class ContractError(DiraError, ValueError):
    exit_code = 2


class FormatError(DiraError):
    exit_code = 3


class CheckpointError(FormatError):
    """Parameter names or shapes do not line up with the model."""


class IntegrityError(FormatError):
    """A Fisher file does not belong to the given source checkpoint."""


class DomainError(DiraError, ValueError):
    exit_code = 3


class NumericError(DiraError, ArithmeticError):
    exit_code = 4
