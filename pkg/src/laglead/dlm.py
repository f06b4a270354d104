"""
Distributed lag models with a lead term as negative control.

Exposure is attached at years t, t-1, t-2 and t+1 by looking up the same zip in the
other year, so gaps in a zip's record never shift values across years. Covariates,
offset and fixed effects stay aligned with the outcome year.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data.panel import KEY_COLUMNS, PRIMARY_COVARIATES, ZipYearPanel
from src.regression.feglm import (
    Z_95,
    FitOptions,
    FitResult,
    RegressionSpec,
    fit_poisson_fe,
    rate_increase,
)
from src.utils.errors import EstimationError
from src.utils.logging import get_logger


logger = get_logger(__name__)


MIN_USABLE_YEARS = 3


def lag_column(analyte: str, lag: int) -> str:
    return f"{analyte}__lag{lag}"


def lead_column(analyte: str, lead: int) -> str:
    return f"{analyte}__lead{lead}"


@dataclass
class LagDesign:
    """Panel rows carrying every lag and lead of one analyte."""

    analyte: str
    frame: pd.DataFrame
    lag_terms: List[str]
    lead_terms: List[str]

    @property
    def terms(self) -> List[str]:
        return self.lag_terms + self.lead_terms


def build_lag_design(
    panel: ZipYearPanel,
    analyte: str,
    lags: Sequence[int] = (0, 1, 2),
    lead: Optional[int] = 1,
) -> LagDesign:
    """
    Attach lagged and lead exposure columns of one analyte.

    Rows missing any of the requested lags or the lead are dropped.

    Raises:
        EstimationError: If the analyte is observed in fewer than three years, or no
            row has a complete lag structure
    """
    frame = panel.frame
    observed_years = frame.loc[frame[analyte].notna(), "year"].nunique()
    if observed_years < MIN_USABLE_YEARS:
        raise EstimationError(
            f"Analyte '{analyte}' has {observed_years} usable years; a lag model needs {MIN_USABLE_YEARS}",
            {"analyte": analyte, "years": int(observed_years)},
        )

    exposure = frame.set_index(KEY_COLUMNS)[analyte]
    zips = frame["zip"].to_numpy()
    years = frame["year"].to_numpy()

    def shifted(offset_years: int) -> np.ndarray:
        index = pd.MultiIndex.from_arrays([zips, years + offset_years], names=KEY_COLUMNS)
        return exposure.reindex(index).to_numpy(dtype=float)

    design = frame.copy()
    lag_terms = []
    for lag in sorted(set(lags)):
        name = lag_column(analyte, lag)
        design[name] = shifted(-lag)
        lag_terms.append(name)
    lead_terms = []
    if lead:
        name = lead_column(analyte, lead)
        design[name] = shifted(lead)
        lead_terms.append(name)

    design = design.dropna(subset=lag_terms + lead_terms).reset_index(drop=True)
    if design.empty:
        raise EstimationError(
            f"No zip-year of '{analyte}' has a complete lag and lead record", {"analyte": analyte}
        )

    logger.debug("lag_design_built", analyte=analyte, rows=len(design), years=design["year"].nunique())
    return LagDesign(analyte=analyte, frame=design, lag_terms=lag_terms, lead_terms=lead_terms)


def cumulative_effect(coefs: np.ndarray, vcov: np.ndarray) -> Tuple[float, float]:
    """Sum of coefficients and its standard error, sqrt(1'V1)."""
    coefs = np.asarray(coefs, dtype=float)
    vcov = np.asarray(vcov, dtype=float)
    ones = np.ones(coefs.shape[0])
    return float(coefs.sum()), float(np.sqrt(max(ones @ vcov @ ones, 0.0)))


@dataclass
class DlmResult:
    """Joint lag/lead fit of one analyte."""

    analyte: str
    lag_terms: List[str]
    lead_terms: List[str]
    coefs: Dict[str, float]
    ses: Dict[str, float]
    vcov: np.ndarray
    cumulative: float
    cumulative_se: float
    n_obs: int
    fit: Optional[FitResult] = field(default=None, repr=False)

    @property
    def cumulative_ci(self) -> Tuple[float, float]:
        return self.cumulative - Z_95 * self.cumulative_se, self.cumulative + Z_95 * self.cumulative_se

    def ci(self, term: str) -> Tuple[float, float]:
        return self.coefs[term] - Z_95 * self.ses[term], self.coefs[term] + Z_95 * self.ses[term]

    @property
    def lead_covers_zero(self) -> bool:
        """Negative control: every lead term's 95% CI contains zero."""
        return all(lo <= 0.0 <= hi for lo, hi in (self.ci(t) for t in self.lead_terms))

    def cumulative_agrees(self, primary_sign: float) -> bool:
        """Cumulative effect has the primary sign and its 95% CI excludes zero."""
        lo, hi = self.cumulative_ci
        if primary_sign > 0:
            return self.cumulative > 0 and lo > 0
        if primary_sign < 0:
            return self.cumulative < 0 and hi < 0
        return False

    def to_row(self, primary_sign: Optional[float] = None) -> dict:
        row = {"analyte": self.analyte, "n_obs": self.n_obs}
        for term in self.lead_terms + self.lag_terms:
            suffix = term.rsplit("__", 1)[1]
            lo, hi = self.ci(term)
            row[f"coef_{suffix}"] = self.coefs[term]
            row[f"se_{suffix}"] = self.ses[term]
            row[f"ci_lo_{suffix}"] = lo
            row[f"ci_hi_{suffix}"] = hi
        lo, hi = self.cumulative_ci
        change = rate_increase(self.cumulative, self.cumulative_se)
        row.update(
            {
                "cum_coef": self.cumulative,
                "cum_se": self.cumulative_se,
                "cum_ci_lo": lo,
                "cum_ci_hi": hi,
                "cum_increase_pct": change.increase_pct,
                "cum_increase_ci_lo": change.ci_lo,
                "cum_increase_ci_hi": change.ci_hi,
            }
        )
        if primary_sign is not None:
            row["pass_m5"] = int(self.cumulative_agrees(primary_sign))
        row["pass_m6"] = int(self.lead_covers_zero)
        return row


def fit_dlm(
    design: LagDesign,
    covariates: Sequence[str] = tuple(PRIMARY_COVARIATES),
    options: Optional[FitOptions] = None,
    cluster: Optional[str] = "zip",
) -> DlmResult:
    """
    One joint fixed-effects Poisson fit with every lag and lead term.

    Raises:
        CollinearityError: When exposure terms are linearly dependent
    """
    spec = RegressionSpec(exposures=design.terms, covariates=list(covariates), cluster=cluster)
    fit = fit_poisson_fe(spec, design.frame, options)

    coefs = {t: fit.coef_of(t) for t in design.terms}
    ses = {t: fit.se_of(t) for t in design.terms}
    lag_coefs, lag_vcov = fit.block(design.lag_terms)
    cumulative, cumulative_se = cumulative_effect(lag_coefs, lag_vcov)
    _, vcov = fit.block(design.terms)

    logger.info(
        "dlm_fitted",
        analyte=design.analyte,
        cumulative=round(cumulative, 6),
        cumulative_se=round(cumulative_se, 6),
        n_obs=fit.n_obs,
    )
    return DlmResult(
        analyte=design.analyte,
        lag_terms=list(design.lag_terms),
        lead_terms=list(design.lead_terms),
        coefs=coefs,
        ses=ses,
        vcov=vcov,
        cumulative=cumulative,
        cumulative_se=cumulative_se,
        n_obs=fit.n_obs,
        fit=fit,
    )
