"""Exception types. Each carries the CLI exit code it maps to."""


class WSVSODError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(WSVSODError, ValueError):
    exit_code = 1
    kind = "config"


class ShapeError(ConfigError):
    """Spatial sizes that the network topology cannot accept."""


class DataFormatError(WSVSODError, ValueError):
    exit_code = 2
    kind = "data"


class NumericalError(WSVSODError, ArithmeticError):
    exit_code = 3
    kind = "numerical"
