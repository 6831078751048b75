"""Exception types raised across the toolkit."""


class TheftNetError(Exception):
    pass


class ConfigurationError(TheftNetError, ValueError):
    """Shapes, specs or hyperparameters that cannot work together."""


class ShapeError(ConfigurationError):
    pass


class DegenerateBatchError(TheftNetError, ValueError):
    pass


class ParseError(TheftNetError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ImputationError(TheftNetError, ValueError):
    pass


class StandardizationError(TheftNetError, ValueError):
    pass


class StratificationError(TheftNetError, ValueError):
    pass


class UndefinedMetricError(TheftNetError, ValueError):
    pass


class TrainingError(TheftNetError, RuntimeError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
