"""Exception types shared across splab modules."""


class SplabError(Exception):
    """Base class for all library errors."""


class DimensionError(SplabError, ValueError):
    pass


class NumericError(SplabError, ArithmeticError):
    pass


class ConfigError(SplabError, ValueError):
    pass


class InputError(SplabError, ValueError):
    pass


class FormatError(SplabError, ValueError):
    pass


class TrainingError(SplabError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DegenerateBaselineError(SplabError, ValueError):
    pass


class TaskError(SplabError, ValueError):
    pass


class StageError(SplabError, RuntimeError):
    pass


class StaleArtifactError(StageError):
    pass
