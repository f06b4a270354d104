"""
Attributable mortality from a fitted exposure coefficient.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from src.data.panel import OUTCOME_COLUMN, ZipYearPanel
from src.regression.feglm import Z_95, FitResult


@dataclass
class AttributionResult:
    """Deaths attributed to one analyte over the study window."""

    analyte: str
    total: float
    ci_lo: float
    ci_hi: float
    n_years: int
    per_row: pd.DataFrame

    @property
    def per_year(self) -> Tuple[float, float, float]:
        n = max(self.n_years, 1)
        return self.total / n, self.ci_lo / n, self.ci_hi / n

    def summary(self) -> dict:
        per_year, lo, hi = self.per_year
        return {
            "analyte": self.analyte,
            "attributable_deaths": self.total,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n_years": self.n_years,
            "deaths_per_year": per_year,
            "per_year_ci_lo": lo,
            "per_year_ci_hi": hi,
        }


def attributable_fraction(beta: float, exposure: np.ndarray, clip: bool = True) -> np.ndarray:
    """1 - exp(-beta * A), set to 0 where beta * A <= 0 when clipping."""
    exposure = np.asarray(exposure, dtype=float)
    fraction = -np.expm1(-beta * exposure)
    if clip:
        fraction = np.where(beta * exposure > 0, fraction, 0.0)
    return fraction


def attributable_mortality(
    fit: FitResult,
    panel: ZipYearPanel,
    analyte: str,
    clip: bool = True,
) -> AttributionResult:
    """
    Sum of y * AF over the rows used by the fit; the interval reruns the sum at the
    95% endpoints of the coefficient.
    """
    frame = panel.frame.loc[fit.used]
    exposure = frame[analyte].to_numpy(dtype=float)
    deaths = frame[OUTCOME_COLUMN].to_numpy(dtype=float)

    beta, se = fit.coef_of(analyte), fit.se_of(analyte)
    per_row = deaths * attributable_fraction(beta, exposure, clip)
    bounds = [
        float((deaths * attributable_fraction(b, exposure, clip)).sum())
        for b in (beta - Z_95 * se, beta + Z_95 * se)
    ]

    table = pd.DataFrame(
        {
            "analyte": analyte,
            "zip": frame["zip"].to_numpy(),
            "year": frame["year"].to_numpy(),
            "attributable_deaths": per_row,
        }
    )
    return AttributionResult(
        analyte=analyte,
        total=float(per_row.sum()),
        ci_lo=min(bounds),
        ci_hi=max(bounds),
        n_years=int(frame["year"].nunique()),
        per_row=table,
    )
