"""
Water-wide association screen: one fixed-effects Poisson fit per analyte, followed by
Benjamini-Hochberg adjustment across analytes.
"""

from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from statsmodels.stats.multitest import multipletests

from src.data.panel import PRIMARY_COVARIATES, ZipYearPanel
from src.regression.feglm import FitOptions, FitResult, RegressionSpec, fit_poisson_fe, rate_increase
from src.utils.errors import WaterWasError
from src.utils.logging import get_logger


logger = get_logger(__name__)


NOT_SIGNIFICANT = "not_significant"
EXCLUDED_AFTER_CHECKS = "excluded_after_checks"
RETAINED = "retained"

LADDER_FLAGS = ["m1", "m2", "m3", "m4", "m5", "m6"]

SCREEN_COLUMNS = [
    "analyte", "class", "coefficient", "std_err", "increase_pct", "ci_lo", "ci_hi",
    "p_value", "bh_p", *LADDER_FLAGS, "status", "n_obs", "dropped_groups", "error",
]


@dataclass
class ScreeningSettings:
    """Settings shared by the screen, the robustness ladder and attribution."""

    alpha: float = 0.05
    ladder_alpha: float = 0.05
    covariates: List[str] = field(default_factory=lambda: list(PRIMARY_COVARIATES))
    cluster: Optional[str] = "zip"
    lags: List[int] = field(default_factory=lambda: [0, 1, 2])
    lead: int = 1
    options: FitOptions = field(default_factory=FitOptions)


@dataclass
class ScreenRow:
    """One analyte's screening record."""

    analyte: str
    analyte_class: str
    coefficient: float = float("nan")
    std_err: float = float("nan")
    increase_pct: float = float("nan")
    ci_lo: float = float("nan")
    ci_hi: float = float("nan")
    p_value: float = float("nan")
    bh_p: float = float("nan")
    flags: dict = field(default_factory=lambda: {f: None for f in LADDER_FLAGS})
    reasons: dict = field(default_factory=dict)
    status: str = NOT_SIGNIFICANT
    n_obs: int = 0
    dropped_groups: int = 0
    error: str = ""
    fit: Optional[FitResult] = field(default=None, repr=False)

    @property
    def has_p(self) -> bool:
        return bool(np.isfinite(self.p_value))

    def significant(self, alpha: float = 0.05) -> bool:
        return bool(np.isfinite(self.bh_p) and self.bh_p < alpha)

    def to_dict(self) -> dict:
        row = {
            "analyte": self.analyte,
            "class": self.analyte_class,
            "coefficient": self.coefficient,
            "std_err": self.std_err,
            "increase_pct": self.increase_pct,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "p_value": self.p_value,
            "bh_p": self.bh_p,
        }
        for flag in LADDER_FLAGS:
            value = self.flags.get(flag)
            row[flag] = "" if value is None else int(value)
        row.update(
            {
                "status": self.status,
                "n_obs": self.n_obs,
                "dropped_groups": self.dropped_groups,
                "error": self.error,
            }
        )
        return row


def bh_adjust(pvalues: Sequence[float]) -> np.ndarray:
    """
    Benjamini-Hochberg step-up adjusted p-values, in input order.

    Missing p-values stay missing and do not count towards the number of tests.
    """
    p = np.asarray(pvalues, dtype=float)
    adjusted = np.full(p.shape, np.nan)
    finite = np.isfinite(p)
    if not finite.any():
        return adjusted
    if ((p[finite] < 0) | (p[finite] > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    _, corrected, _, _ = multipletests(p[finite], method="fdr_bh")
    adjusted[finite] = np.minimum(corrected, 1.0)
    return adjusted


def primary_spec(analyte: str, settings: ScreeningSettings) -> RegressionSpec:
    return RegressionSpec(
        exposures=[analyte], covariates=list(settings.covariates), cluster=settings.cluster
    )


def screen_analyte(panel: ZipYearPanel, analyte: str, settings: ScreeningSettings) -> ScreenRow:
    """Fit the primary specification for one analyte; failures are recorded, not raised."""
    row = ScreenRow(analyte=analyte, analyte_class=panel.analyte_class(analyte))
    try:
        fit = fit_poisson_fe(primary_spec(analyte, settings), panel, settings.options)
    except (WaterWasError, ValueError, np.linalg.LinAlgError) as e:
        row.error = str(e)
        logger.warning("screen_fit_failed", analyte=analyte, error=str(e))
        return row

    coef, se = fit.coef_of(analyte), fit.se_of(analyte)
    change = rate_increase(coef, se)
    row.coefficient = coef
    row.std_err = se
    row.increase_pct = change.increase_pct
    row.ci_lo = change.ci_lo
    row.ci_hi = change.ci_hi
    row.p_value = fit.p_of(analyte)
    row.n_obs = fit.n_obs
    row.dropped_groups = fit.dropped_groups
    row.fit = fit
    return row


def run_screen(
    panel: ZipYearPanel,
    settings: Optional[ScreeningSettings] = None,
    map_fn: Callable = map,
    analytes: Optional[Iterable[str]] = None,
) -> List[ScreenRow]:
    """
    Screen every analyte and BH-adjust the resulting p-values.

    Args:
        panel: Prepared (standardized) panel
        settings: Screening settings
        map_fn: Order-preserving map used to run the per-analyte fits
        analytes: Subset to screen (all panel analytes by default)

    Returns:
        ScreenRows in analyte order, status set to not_significant until the ladder runs
    """
    settings = settings or ScreeningSettings()
    names = sorted(analytes if analytes is not None else panel.analytes)

    rows = list(map_fn(lambda a: screen_analyte(panel, a, settings), names))

    adjusted = bh_adjust([r.p_value for r in rows])
    for row, q in zip(rows, adjusted):
        row.bh_p = float(q)

    failed = [r.analyte for r in rows if not r.has_p]
    if failed:
        logger.warning("analytes_without_p_value", count=len(failed), analytes=failed)
    logger.info(
        "screen_complete",
        analytes=len(rows),
        significant=sum(r.significant(settings.alpha) for r in rows),
    )
    return rows


def assign_status(row: ScreenRow, alpha: float = 0.05) -> str:
    """retained / excluded_after_checks / not_significant from bh_p and ladder flags."""
    if not row.significant(alpha):
        return NOT_SIGNIFICANT
    if all(row.flags.get(f) is True for f in LADDER_FLAGS):
        return RETAINED
    return EXCLUDED_AFTER_CHECKS


def screen_table(rows: Sequence[ScreenRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in rows], columns=SCREEN_COLUMNS)
