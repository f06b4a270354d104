"""
Robustness ladder for analytes that survive multiple-testing correction.

M1-M4 refit the analyte under alternative outcome or covariate specifications and pass
when the coefficient keeps the primary sign with p below the ladder threshold. M5 and
M6 come from the distributed lag model: the cumulative lag effect must agree with the
primary sign, and the lead term must be null.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.data.panel import (
    AGE_ADJUSTED_COLUMN,
    AGE_SHARE_COLUMNS,
    GROUNDWATER_COLUMN,
    INCOME_COLUMN,
    POPULATION_COLUMN,
    ZipYearPanel,
)
from src.laglead.dlm import DlmResult, build_lag_design, fit_dlm
from src.regression.feglm import FitOptions, FitResult, RegressionSpec, fit_poisson_fe
from src.screening.screen import ScreenRow, ScreeningSettings, assign_status
from src.utils.errors import WaterWasError
from src.utils.logging import get_logger


logger = get_logger(__name__)


AGE_ADJUSTED_DEATHS = "age_adjusted_deaths"


@dataclass(frozen=True)
class LadderRung:
    """An alternative specification: outcome column plus covariate set."""

    name: str
    covariates: List[str]
    age_adjusted_outcome: bool = False
    description: str = ""


LADDER_RUNGS = [
    LadderRung("m1", [INCOME_COLUMN, GROUNDWATER_COLUMN], True, "age-adjusted mortality outcome"),
    LadderRung("m2", [], False, "fixed effects only"),
    LadderRung("m3", [INCOME_COLUMN] + AGE_SHARE_COLUMNS, False, "no water source"),
    LadderRung("m4", list(AGE_SHARE_COLUMNS), False, "age shares only"),
]


@dataclass
class LadderResult:
    """Six pass/fail flags with a reason for each failure."""

    analyte: str
    flags: Dict[str, bool] = field(default_factory=dict)
    reasons: Dict[str, str] = field(default_factory=dict)
    dlm: Optional[DlmResult] = field(default=None, repr=False)

    @property
    def all_pass(self) -> bool:
        return len(self.flags) == 6 and all(self.flags.values())


def age_adjusted_counts(frame: pd.DataFrame) -> pd.Series:
    """Expected deaths from the age-adjusted rate per 100k, rounded to whole deaths."""
    return np.round(frame[AGE_ADJUSTED_COLUMN] * frame[POPULATION_COLUMN] / 1e5)


def fit_rung(
    panel: ZipYearPanel,
    analyte: str,
    rung: LadderRung,
    options: Optional[FitOptions] = None,
    cluster: Optional[str] = "zip",
) -> FitResult:
    frame = panel.frame
    outcome = "deaths"
    if rung.age_adjusted_outcome:
        if AGE_ADJUSTED_COLUMN not in frame.columns:
            raise WaterWasError(f"Panel has no '{AGE_ADJUSTED_COLUMN}' column")
        frame = frame.assign(**{AGE_ADJUSTED_DEATHS: age_adjusted_counts(frame)})
        outcome = AGE_ADJUSTED_DEATHS

    spec = RegressionSpec(
        exposures=[analyte], covariates=list(rung.covariates), outcome=outcome, cluster=cluster
    )
    return fit_poisson_fe(spec, frame, options)


def _agrees(fit: FitResult, analyte: str, primary_coef: float, alpha: float) -> bool:
    coef = fit.coef_of(analyte)
    return bool(np.sign(coef) == np.sign(primary_coef) and fit.p_of(analyte) < alpha)


def robustness_ladder(
    analyte: str,
    panel: ZipYearPanel,
    primary_coef: float,
    settings: Optional[ScreeningSettings] = None,
    rungs: Sequence[LadderRung] = tuple(LADDER_RUNGS),
) -> LadderResult:
    """
    Evaluate the six robustness checks for one analyte.

    A sub-fit failure fails its flag and records the reason.
    """
    settings = settings or ScreeningSettings()
    result = LadderResult(analyte=analyte)

    for rung in rungs:
        try:
            fit = fit_rung(panel, analyte, rung, settings.options, settings.cluster)
            passed = _agrees(fit, analyte, primary_coef, settings.ladder_alpha)
            result.flags[rung.name] = passed
            if not passed:
                result.reasons[rung.name] = (
                    f"coef={fit.coef_of(analyte):.6g} p={fit.p_of(analyte):.4g} ({rung.description})"
                )
        except (WaterWasError, ValueError, KeyError, np.linalg.LinAlgError) as e:
            result.flags[rung.name] = False
            result.reasons[rung.name] = f"fit failed: {e}"

    try:
        design = build_lag_design(panel, analyte, settings.lags, settings.lead)
        dlm = fit_dlm(design, settings.covariates, settings.options, settings.cluster)
        result.dlm = dlm
        result.flags["m5"] = dlm.cumulative_agrees(np.sign(primary_coef))
        result.flags["m6"] = dlm.lead_covers_zero
        if not result.flags["m5"]:
            lo, hi = dlm.cumulative_ci
            result.reasons["m5"] = f"cumulative={dlm.cumulative:.6g} ci=({lo:.6g}, {hi:.6g})"
        if not result.flags["m6"]:
            result.reasons["m6"] = "lead term CI excludes 0"
    except (WaterWasError, ValueError, KeyError, np.linalg.LinAlgError) as e:
        result.flags["m5"] = False
        result.flags["m6"] = False
        result.reasons["m5"] = result.reasons["m6"] = f"lag model failed: {e}"

    logger.info("ladder_evaluated", analyte=analyte, flags=result.flags)
    return result


def apply_ladder(
    rows: List[ScreenRow],
    panel: ZipYearPanel,
    settings: Optional[ScreeningSettings] = None,
    map_fn: Callable = map,
) -> List[ScreenRow]:
    """Run the ladder on every BH-significant row and set each row's status."""
    settings = settings or ScreeningSettings()
    significant = [r for r in rows if r.significant(settings.alpha)]

    ladders = list(
        map_fn(lambda r: robustness_ladder(r.analyte, panel, r.coefficient, settings), significant)
    )
    for row, ladder in zip(significant, ladders):
        row.flags.update(ladder.flags)
        row.reasons = dict(ladder.reasons)

    for row in rows:
        row.status = assign_status(row, settings.alpha)
    return rows
