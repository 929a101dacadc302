"""Exception types raised across the package."""


class SAIRError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(SAIRError, ValueError):
    pass


class ShapeError(SAIRError, ValueError):
    pass


class ConfigurationError(SAIRError):
    pass


class GenerationError(SAIRError, RuntimeError):
    """A mask generator could not hit the requested ratio bucket."""


class DatasetIOError(SAIRError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class TrainingDivergedError(SAIRError, RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
