"""Exception hierarchy; each maps to a CLI exit code."""


class PBNetError(Exception):
    exit_code = 1


class ConfigError(PBNetError, ValueError):
    exit_code = 2


class ShapeError(PBNetError, ValueError):
    exit_code = 2


class DataError(PBNetError, OSError):
    exit_code = 3


class NumericError(PBNetError, ArithmeticError):
    exit_code = 4
