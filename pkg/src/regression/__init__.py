"""Fixed-effects Poisson regression."""

from src.regression.feglm import (
    Z_95,
    FitOptions,
    FitResult,
    PercentChange,
    RegressionSpec,
    cluster_vcov,
    complete_rows,
    demean,
    drop_all_zero_levels,
    factorize,
    find_collinear,
    screen_collinear,
    fit_poisson_arrays,
    fit_poisson_fe,
    poisson_deviance,
    rate_increase,
    sandwich,
)

__all__ = [
    "Z_95",
    "FitOptions",
    "FitResult",
    "PercentChange",
    "RegressionSpec",
    "cluster_vcov",
    "complete_rows",
    "demean",
    "drop_all_zero_levels",
    "factorize",
    "find_collinear",
    "screen_collinear",
    "fit_poisson_arrays",
    "fit_poisson_fe",
    "poisson_deviance",
    "rate_increase",
    "sandwich",
]
