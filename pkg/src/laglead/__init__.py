"""Distributed lag models and the lead negative control."""

from src.laglead.dlm import (
    DlmResult,
    LagDesign,
    build_lag_design,
    cumulative_effect,
    fit_dlm,
    lag_column,
    lead_column,
)

__all__ = [
    "DlmResult",
    "LagDesign",
    "build_lag_design",
    "cumulative_effect",
    "fit_dlm",
    "lag_column",
    "lead_column",
]
