"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TsprError(Exception):
    exit_code = 1


class ConfigError(TsprError, ValueError):
    exit_code = 2


class DataError(TsprError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class EstimationError(TsprError, ArithmeticError):
    exit_code = 4


class BootstrapError(EstimationError):
    pass


class FitError(EstimationError):
    pass


class BracketingError(EstimationError):
    pass
