"""
Column filters and z-scoring applied to the built panel.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from src.data.panel import ZipYearPanel
from src.utils.errors import ZeroVarianceError
from src.utils.logging import get_logger


logger = get_logger(__name__)


DEFAULT_MISSING_THRESHOLD = 0.5
DEFAULT_FREQ_CUT = 19.0
DEFAULT_UNIQUE_CUT = 0.1024
SIGNIFICANT_DIGITS = 12

SUMMARY_COLUMNS = ["analyte", "n_nonmissing", "missing_pct", "freq_ratio", "unique_pct", "kept", "mean", "sd"]


@dataclass
class ColumnProfile:
    """Filter statistics for one analyte column."""

    analyte: str
    n_nonmissing: int
    missing_pct: float
    freq_ratio: float
    unique_pct: float
    kept: bool
    mean: float
    sd: float

    def to_dict(self) -> dict:
        return {
            "analyte": self.analyte,
            "n_nonmissing": self.n_nonmissing,
            "missing_pct": self.missing_pct,
            "freq_ratio": self.freq_ratio,
            "unique_pct": self.unique_pct,
            "kept": int(self.kept),
            "mean": self.mean,
            "sd": self.sd,
        }


def _round_significant(values: np.ndarray, digits: int = SIGNIFICANT_DIGITS) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    out = values.copy()
    nonzero = values != 0
    magnitude = np.floor(np.log10(np.abs(values[nonzero])))
    scale = 10.0 ** (digits - 1 - magnitude)
    out[nonzero] = np.round(values[nonzero] * scale) / scale
    return out


def missing_fraction(column: pd.Series) -> float:
    if len(column) == 0:
        return 1.0
    return float(column.isna().mean())


def filter_missingness(column: pd.Series, threshold: float = DEFAULT_MISSING_THRESHOLD) -> bool:
    """
    Keep/drop decision on missingness.

    Returns:
        True to keep the column, False when its missing fraction is at or above threshold
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    return missing_fraction(column) < threshold


def frequency_profile(column: pd.Series) -> Tuple[float, float]:
    """
    Frequency ratio and percent of unique values over the non-missing entries.

    Values are rounded to 12 significant digits first. A column with a single distinct
    value has an infinite frequency ratio.
    """
    values = column.dropna().to_numpy(dtype=float)
    if values.size == 0:
        return float("inf"), 0.0

    counts = pd.Series(_round_significant(values)).value_counts(sort=True)
    ratio = float("inf") if len(counts) < 2 else counts.iloc[0] / counts.iloc[1]
    unique_pct = len(counts) / values.size * 100.0
    return float(ratio), float(unique_pct)


def near_zero_variance(
    column: pd.Series,
    freq_cut: float = DEFAULT_FREQ_CUT,
    unique_cut: float = DEFAULT_UNIQUE_CUT,
) -> bool:
    """True (drop) iff frequency ratio > freq_cut and unique percent < unique_cut."""
    ratio, unique_pct = frequency_profile(column)
    return ratio > freq_cut and unique_pct < unique_cut


def standardize(column: pd.Series) -> Tuple[pd.Series, float, float]:
    """
    Z-score the non-missing entries with the sample (n-1) standard deviation.

    Returns:
        Tuple of (standardized column, mean, sd)

    Raises:
        ZeroVarianceError: When the sample sd is zero or undefined
    """
    mean = float(column.mean())
    sd = float(column.std(ddof=1))
    if not np.isfinite(sd) or sd <= 0:
        raise ZeroVarianceError(
            f"Column '{column.name}' has zero variance", {"analyte": str(column.name)}
        )
    return (column - mean) / sd, mean, sd


def prepare_panel(
    panel: ZipYearPanel,
    missing_threshold: float = DEFAULT_MISSING_THRESHOLD,
    freq_cut: float = DEFAULT_FREQ_CUT,
    unique_cut: float = DEFAULT_UNIQUE_CUT,
) -> Tuple[ZipYearPanel, pd.DataFrame]:
    """
    Apply the missingness and near-zero-variance filters, then standardize survivors.

    Both filters are evaluated on the raw column independently, so their order does not
    matter. Standardization constants are computed once over every non-missing zip-year
    and stored on the returned panel.

    Returns:
        Tuple of (prepared panel, per-analyte summary table)
    """
    frame = panel.frame.copy()
    profiles = []
    kept = []
    scaling = {}

    for analyte in panel.analytes:
        column = frame[analyte]
        ratio, unique_pct = frequency_profile(column)
        n_nonmissing = int(column.notna().sum())

        keep = filter_missingness(column, missing_threshold)
        keep = keep and not near_zero_variance(column, freq_cut, unique_cut)

        mean = float(column.mean()) if n_nonmissing else float("nan")
        sd = float(column.std(ddof=1)) if n_nonmissing > 1 else float("nan")

        if keep:
            try:
                frame[analyte], mean, sd = standardize(column)
                scaling[analyte] = (mean, sd)
                kept.append(analyte)
            except ZeroVarianceError:
                logger.warning("analyte_zero_variance", analyte=analyte, n_nonmissing=n_nonmissing)
                keep = False

        profiles.append(
            ColumnProfile(
                analyte=analyte,
                n_nonmissing=n_nonmissing,
                missing_pct=missing_fraction(column) * 100.0,
                freq_ratio=ratio,
                unique_pct=unique_pct,
                kept=keep,
                mean=mean,
                sd=sd,
            )
        )

    dropped = [a for a in panel.analytes if a not in scaling]
    frame = frame.drop(columns=dropped)
    prepared = ZipYearPanel(
        frame=frame,
        analytes=kept,
        analyte_classes={a: panel.analyte_class(a) for a in kept},
        scaling=scaling,
    )

    summary = pd.DataFrame([p.to_dict() for p in profiles], columns=SUMMARY_COLUMNS)
    logger.info("panel_prepared", analytes_in=len(panel.analytes), analytes_kept=len(kept))
    return prepared, summary
