"""Demand-homogeneous curbside parking zones from paid transaction data."""

from curbzones.exceptions import (
    CurbzonesError,
    DegenerateVarianceError,
    DegenerateWeightsError,
    EmptySliceError,
    FitFailureError,
    InvalidInputError,
    InvalidModelError,
    ParseError,
)
from curbzones.ingest import (
    BlockFace,
    OccupancyGrid,
    Schedule,
    Transaction,
    build_grid,
    estimate_supply,
    minute_occupancy,
    slice_mean,
)
from curbzones.mixture import (
    EMConfig,
    MinMaxFeatures,
    ZoneMixture,
    ZoneModel,
    assign,
    bic,
    e_step,
    em_fit,
    log_likelihood,
    m_step,
    select_k,
)
from curbzones.spatial import (
    MoranReport,
    WeightMatrix,
    build_weights,
    morans_i,
    significance,
    significance_sweep,
)
from curbzones.temporal import (
    centroid_dispersion,
    consistency_metric,
    occupancy_diff,
    seasonal_delta,
    zone_variance,
)

__version__ = "0.1.0"

__all__ = [
    "BlockFace",
    "CurbzonesError",
    "DegenerateVarianceError",
    "DegenerateWeightsError",
    "EMConfig",
    "EmptySliceError",
    "FitFailureError",
    "InvalidInputError",
    "InvalidModelError",
    "MinMaxFeatures",
    "MoranReport",
    "OccupancyGrid",
    "ParseError",
    "Schedule",
    "Transaction",
    "WeightMatrix",
    "ZoneMixture",
    "ZoneModel",
    "assign",
    "bic",
    "build_grid",
    "build_weights",
    "centroid_dispersion",
    "consistency_metric",
    "e_step",
    "em_fit",
    "estimate_supply",
    "log_likelihood",
    "m_step",
    "minute_occupancy",
    "morans_i",
    "occupancy_diff",
    "seasonal_delta",
    "select_k",
    "significance",
    "significance_sweep",
    "slice_mean",
    "zone_variance",
]
