"""Cross-validated counterfactual risk estimation for dynamic marginal
structural working models over longitudinal treatment data."""

from .core import (
    CrossValPlan,
    LongitudinalDataset,
    RegimeFamily,
    ThetaMeasure,
    cumulative_compliance,
    dataset_from_csv,
    make_folds,
    regime_indicator,
    theta_draws,
    theta_grid,
)

__all__ = [
    "CrossValPlan",
    "LongitudinalDataset",
    "RegimeFamily",
    "ThetaMeasure",
    "cumulative_compliance",
    "dataset_from_csv",
    "make_folds",
    "regime_indicator",
    "theta_draws",
    "theta_grid",
]

__version__ = "0.1.0"
