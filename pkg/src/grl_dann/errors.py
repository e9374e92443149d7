"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class DannError(Exception):
    exit_code = 1


class ConfigError(DannError):
    exit_code = 2


class DataError(DannError):
    exit_code = 3


class NumericError(DannError):
    exit_code = 4


class ShapeError(DataError, ValueError):
    pass


class LabelError(DataError, ValueError):
    pass


class LabelLeakError(DataError):
    """A training code path tried to read a hidden target-domain label."""


class CompositionError(DataError):
    pass


class StateError(NumericError, RuntimeError):
    pass


class OracleError(NumericError):
    pass


class RangeError(ConfigError, ValueError):
    pass


class CollinearityError(NumericError, ValueError):
    pass


class TooFewPointsError(DataError, ValueError):
    pass
