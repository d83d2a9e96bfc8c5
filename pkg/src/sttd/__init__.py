"""Spatial-temporal Tweedie demand forecasting on O-D flow graphs."""

from .errors import STTDError
from .tweedie import (
    CompoundPoissonGamma,
    Family,
    FamilyIndex,
    TweedieParams,
    cdf,
    family_log_density,
    log_density_exact,
    log_density_surrogate,
    quantile,
    sample,
    to_compound,
    zero_mass,
)

__all__ = [
    "STTDError",
    "CompoundPoissonGamma",
    "Family",
    "FamilyIndex",
    "TweedieParams",
    "cdf",
    "family_log_density",
    "log_density_exact",
    "log_density_surrogate",
    "quantile",
    "sample",
    "to_compound",
    "zero_mass",
]
