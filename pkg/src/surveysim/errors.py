"""Exception types shared across the package."""


class SurveySimError(Exception):
    """Base class for all surveysim errors."""


class ConfigError(SurveySimError, ValueError):
    """A configuration value is missing, malformed, or out of range."""


class DesignError(SurveySimError, ValueError):
    """A sampling design cannot be realized on the given frame."""


class CalibrationError(SurveySimError, RuntimeError):
    """Response-model calibration failed to reach its target rate."""


class DegenerateDesignError(SurveySimError, ValueError):
    """The imputation model cannot be identified on the given data."""


class NumericalError(SurveySimError, RuntimeError):
    """A linear-algebra step failed (singular or non-PD matrix)."""


class InsufficientDataError(SurveySimError, ValueError):
    """Too few observed values for the requested estimate."""


class VarianceUndefinedError(SurveySimError, ValueError):
    """The design-based variance estimator is undefined (lone PSU stratum)."""


class PoolingError(SurveySimError, ValueError):
    """Rubin pooling needs at least two completed-data estimates."""
