"""Exception types raised across the lab."""


class KPLabError(Exception):
    pass


class DimensionError(KPLabError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(KPLabError, FloatingPointError):
    """An operation produced NaN or Inf."""


class UsageError(KPLabError, ValueError):
    pass


class ConfigError(KPLabError, ValueError):
    pass


class TrainingError(KPLabError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class DegenerateFeatureError(KPLabError, ValueError):
    """The tap feature does not respond to input noise (delta_f^2 == 0)."""


class OptimizationError(KPLabError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class BaselineError(KPLabError, ValueError):
    """No background cells to form the entropy baseline."""


class UndefinedMetricError(KPLabError, ValueError):
    pass


class GenerationError(KPLabError, RuntimeError):
    pass


class StageError(KPLabError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
