class StreamwatchError(Exception):
    exit_code = 3


class ValidationError(StreamwatchError, ValueError):
    exit_code = 1


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class CheckpointError(StreamwatchError):
    exit_code = 2


class InvariantError(StreamwatchError, AssertionError):
    exit_code = 3
