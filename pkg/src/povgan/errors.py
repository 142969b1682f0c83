"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value or combination of values is unusable."""


class SamplingError(RuntimeError):
    """Rejection sampling exhausted its retry budget (degenerate support)."""


class StatisticalValidityError(ValueError):
    """A metric was asked to run on too few samples to be meaningful."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; carries a diagnostic record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
