"""Exception hierarchy. The CLI maps each family to a stable exit code."""


class ObjnError(Exception):
    exit_code = 1


class ConfigError(ObjnError, ValueError):
    exit_code = 2


class DataError(ObjnError, ValueError):
    exit_code = 3


class CheckpointError(ObjnError, ValueError):
    exit_code = 4


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class ParameterShapeError(CheckpointError):
    pass


class UnexpectedParameterError(CheckpointError):
    pass


class IncompatibleTrunkError(CheckpointError):
    pass
