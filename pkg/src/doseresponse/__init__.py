"""Penalized-spline exposure-response curves."""

from src.doseresponse.basis import BSplineBasis, bspline_basis, difference_penalty
from src.doseresponse.pspline import (
    CURVE_COLUMNS,
    DoseResponseResult,
    DoseResponseSettings,
    GamFit,
    LambdaSelection,
    curve_table,
    density_table,
    derivative_curve,
    fit_exposure_response,
    fit_pspline,
    lambda_grid,
    select_lambda,
)

__all__ = [
    "BSplineBasis",
    "bspline_basis",
    "difference_penalty",
    "CURVE_COLUMNS",
    "DoseResponseResult",
    "DoseResponseSettings",
    "GamFit",
    "LambdaSelection",
    "curve_table",
    "density_table",
    "derivative_curve",
    "fit_exposure_response",
    "fit_pspline",
    "lambda_grid",
    "select_lambda",
]
