"""Exception types raised across the package."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class InputTooSmallError(DimensionError):
    """A volume is smaller than a layer's receptive footprint."""


class FormatError(ValueError):
    """A file does not follow its on-disk format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateInputError(ValueError):
    """Input carries no usable content for the requested operation."""


class StratificationError(ValueError):
    """A stratified split left some class without members in a subset."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. AUC on one class)."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
