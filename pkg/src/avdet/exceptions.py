"""Exception hierarchy shared by every stage."""


class AVDetError(Exception):
    """Base class for all package errors."""


class ConfigError(AVDetError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(AVDetError, ValueError):
    pass


class ChannelError(ShapeError):
    pass


class RangeError(AVDetError, ValueError):
    pass


class LoadError(AVDetError):
    """Recorded-scene loading failure with a machine-readable ``code``."""

    MISSING_FILE = "missing_file"
    MALFORMED_JSON = "malformed_json"
    SAMPLE_RATE_MISMATCH = "sample_rate_mismatch"
    UNKNOWN_FRAME = "unknown_frame"
    BAD_LAYOUT = "bad_layout"

    def __init__(self, code, message):
        self.code = code
        super().__init__(f"[{code}] {message}")


class NumericalError(AVDetError, FloatingPointError):
    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(message if layer is None else f"layer {layer}: {message}")


class TrainingError(AVDetError, RuntimeError):
    pass


class ModelStateError(AVDetError, RuntimeError):
    pass


class StageError(AVDetError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
