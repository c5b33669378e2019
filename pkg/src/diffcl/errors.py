class DiffCLError(Exception):
    exit_code = 1


class ConfigError(DiffCLError, ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class VolumeIOError(DiffCLError, OSError):
    exit_code = 3

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class VolumeFormatError(VolumeIOError):
    pass


class CheckpointError(DiffCLError, OSError):
    exit_code = 3


class NumericError(DiffCLError, FloatingPointError):
    exit_code = 4


class NoDataError(DiffCLError):
    exit_code = 5
