class StageSchedError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(StageSchedError, ValueError):
    """Bad or inconsistent input: unknown model, missing coefficients, malformed file."""


class FitError(ConfigError):
    pass


class InfeasibleError(StageSchedError):
    """No schedule or placement exists for the given configuration."""


class InvalidStageError(StageSchedError):
    pass


class PlanMismatchError(StageSchedError):
    """A plan does not match the application it is replayed against."""
