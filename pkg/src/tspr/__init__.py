"""Two-sided prioritized ranking experiments for marketplace simulations."""

from tspr.behavior import BookingParams, ClickParams, TreatmentSpec
from tspr.design import DesignParams
from tspr.errors import (
    BootstrapError,
    BracketingError,
    ConfigError,
    DataError,
    EstimationError,
    FitError,
    SchemaError,
    TsprError,
)
from tspr.estimators import EstimateReport, StratumStats

__all__ = [
    "BookingParams",
    "BootstrapError",
    "BracketingError",
    "ClickParams",
    "ConfigError",
    "DataError",
    "DesignParams",
    "EstimateReport",
    "EstimationError",
    "FitError",
    "SchemaError",
    "StratumStats",
    "TreatmentSpec",
    "TsprError",
]

__version__ = "0.1.0"
