"""Exception hierarchy shared across the package."""


class TavpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TavpError, ValueError):
    pass


class EmptySceneError(TavpError):
    """Raised when a point-cloud stage would leave zero points."""


class NoSignalError(TavpError):
    """Raised when no valid heatmap view is available for lifting or losses."""


class ShapeError(TavpError, ValueError):
    pass


class SceneGenerationError(TavpError):
    pass


class ConfigError(TavpError, ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class CheckpointError(TavpError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(message)


class TrainingDivergedError(TavpError):
    """Raised when a loss turns NaN; carries a diagnostics dict."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class FreezeViolationError(TavpError):
    pass
