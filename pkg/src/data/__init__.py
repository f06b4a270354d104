"""Input loading, panel construction and column preparation."""

from src.data.loader import (
    RawInputs,
    load_inputs,
    read_crosswalk,
    read_deaths,
    read_demographics,
    read_lods,
    read_mcl,
    read_samples,
    read_sources,
)
from src.data.panel import PRIMARY_COVARIATES, ZipYearPanel
from src.data.panelprep import (
    filter_missingness,
    frequency_profile,
    near_zero_variance,
    prepare_panel,
    standardize,
)
from src.data.preprocessing import (
    PanelBuildReport,
    age_shares,
    build_panel,
    classify_groundwater,
    grouped_weighted_median,
    impute_lod,
    impute_nondetects,
    weighted_median,
)

__all__ = [
    "RawInputs",
    "load_inputs",
    "read_samples",
    "read_lods",
    "read_crosswalk",
    "read_sources",
    "read_demographics",
    "read_deaths",
    "read_mcl",
    "ZipYearPanel",
    "PRIMARY_COVARIATES",
    "PanelBuildReport",
    "impute_lod",
    "impute_nondetects",
    "weighted_median",
    "grouped_weighted_median",
    "classify_groundwater",
    "age_shares",
    "build_panel",
    "filter_missingness",
    "frequency_profile",
    "near_zero_variance",
    "standardize",
    "prepare_panel",
]
