"""
Exposure aggregation and covariate construction for the zip-year panel.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data.loader import SOURCE_CODES, RawInputs
from src.data.panel import (
    AGE_ADJUSTED_COLUMN,
    AGE_COUNT_COLUMNS,
    AGE_SHARE_COLUMNS,
    GROUNDWATER_COLUMN,
    INCOME_COLUMN,
    KEY_COLUMNS,
    OFFSET_COLUMN,
    OUTCOME_COLUMN,
    POPULATION_COLUMN,
    UNCLASSIFIED,
    ZipYearPanel,
)
from src.utils.errors import InputDataError, MissingLodError, UnknownSourceCodeError
from src.utils.logging import get_logger


logger = get_logger(__name__)


GROUNDWATER_CODES = frozenset({"GW", "GWP"})
AGE_EXCESS_TOLERANCE = 0.02
MEDIAN_TOLERANCE = 1e-12

_RESERVED_COLUMNS = set(
    KEY_COLUMNS
    + [OUTCOME_COLUMN, "censored", POPULATION_COLUMN, OFFSET_COLUMN, AGE_ADJUSTED_COLUMN]
    + AGE_COUNT_COLUMNS
    + AGE_SHARE_COLUMNS
    + [INCOME_COLUMN, GROUNDWATER_COLUMN]
)


@dataclass
class PanelBuildReport:
    """What happened while building the panel."""

    n_samples: int = 0
    n_imputed: int = 0
    n_rows: int = 0
    n_analytes: int = 0
    unmapped_pws: List[str] = field(default_factory=list)
    excluded_rows: List[dict] = field(default_factory=list)
    flagged_rows: List[dict] = field(default_factory=list)
    censored_rows: int = 0
    censored_dropped: int = 0
    rows_without_groundwater: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def impute_lod(value: float, lod: Optional[float], analyte: str = "") -> float:
    """
    Replace a non-detect (recorded as exactly 0) by LOD/√2.

    Args:
        value: Measured concentration, non-negative
        lod: Limit of detection for the analyte
        analyte: Analyte name, used in the error message

    Returns:
        lod/√2 when value is 0, value otherwise

    Raises:
        MissingLodError: When value is 0 and no LOD is available
    """
    if value != 0:
        return value
    if lod is None or not np.isfinite(lod):
        raise MissingLodError(analyte or "<unknown>")
    if lod <= 0:
        raise ValueError(f"LOD must be positive, got {lod}")
    return lod / math.sqrt(2)


def impute_nondetects(samples: pd.DataFrame, lods: pd.DataFrame) -> Tuple[pd.DataFrame, int]:
    """
    Vectorised LOD imputation over a sample table.

    Returns:
        Tuple of (samples with imputed values, number of values imputed)
    """
    out = samples.copy()
    zero = out["value"].to_numpy() == 0
    if not zero.any():
        return out, 0

    lod = out["analyte"].map(lods["lod"])
    lacking = zero & lod.isna().to_numpy()
    if lacking.any():
        analyte = sorted(out.loc[lacking, "analyte"].unique())[0]
        raise MissingLodError(analyte)

    out.loc[zero, "value"] = lod[zero].to_numpy() / math.sqrt(2)
    return out, int(zero.sum())


def weighted_median(values: Sequence[float], weights: Sequence[float]) -> float:
    """
    Lower weighted median: the smallest value whose normalised cumulative weight
    reaches one half.

    Raises:
        ValueError: On empty input, mismatched lengths, negative or all-zero weights
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.size == 0:
        raise ValueError("weighted_median of empty input")
    if values.shape != weights.shape:
        raise ValueError("values and weights must have the same length")
    if (weights < 0).any():
        raise ValueError("weights must be non-negative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")

    order = np.argsort(values, kind="mergesort")
    cumulative = np.cumsum(weights[order]) / total
    idx = int(np.argmax(cumulative >= 0.5 - MEDIAN_TOLERANCE))
    return float(values[order][idx])


def grouped_weighted_median(
    df: pd.DataFrame,
    keys: List[str],
    value_col: str = "value",
    weight_col: str = "weight",
) -> pd.Series:
    """
    Lower weighted median of ``value_col`` within each group of ``keys``.

    Groups whose weights sum to zero are omitted from the result.
    """
    ordered = df.sort_values(keys + [value_col], kind="mergesort")
    grouped = ordered.groupby(keys, sort=False)[weight_col]
    cumulative = grouped.cumsum()
    total = grouped.transform("sum")

    with np.errstate(divide="ignore", invalid="ignore"):
        share = cumulative / total
    hit = (share >= 0.5 - MEDIAN_TOLERANCE) & (total > 0)

    return ordered[hit].groupby(keys, sort=True)[value_col].first()


def classify_groundwater(sources: Iterable[str]) -> bool:
    """True iff any of the PWS source codes is groundwater (GW or GWP)."""
    codes = set(sources)
    if not codes:
        raise ValueError("classify_groundwater needs at least one source code")
    unknown = codes - SOURCE_CODES
    if unknown:
        raise UnknownSourceCodeError(f"Unknown source codes {sorted(unknown)}")
    return bool(codes & GROUNDWATER_CODES)


def age_shares(age_counts: Sequence[float] | np.ndarray, population: float | np.ndarray) -> np.ndarray:
    """
    Percent of the population in each of the five age bands.

    Accepts one row of five counts, or an (n, 5) array with a population vector.
    """
    counts = np.asarray(age_counts, dtype=float)
    population = np.asarray(population, dtype=float)
    if (population <= 0).any():
        raise ValueError("age_shares requires a positive population")
    if counts.ndim == 2:
        population = population.reshape(-1, 1)
    return counts / population * 100.0


def _sample_weights(samples: pd.DataFrame, crosswalk: pd.DataFrame) -> pd.DataFrame:
    # Area share of each PWS, split evenly across its samples of the analyte that year
    n_per_pws = samples.groupby(["pws_id", "year", "analyte"])["value"].transform("size")
    samples = samples.assign(n_pws_samples=n_per_pws)

    mapped = crosswalk[crosswalk["weight"] > 0]
    pairs = samples.merge(mapped, on="pws_id", how="inner")
    pairs["weight"] = pairs["weight"] / pairs["n_pws_samples"]
    return pairs


def _groundwater_flags(
    pairs: pd.DataFrame,
    crosswalk: pd.DataFrame,
    sources: pd.DataFrame,
    rows: pd.DataFrame,
) -> pd.Series:
    source_of = sources.set_index("pws_id")["source_code"]

    active = pairs[["zip", "year", "pws_id"]].drop_duplicates()
    active = active.assign(source_code=active["pws_id"].map(source_of)).dropna(subset=["source_code"])
    by_year = active.groupby(["zip", "year"])["source_code"].agg(classify_groundwater)

    mapped = crosswalk[crosswalk["weight"] > 0]
    mapped = mapped.assign(source_code=mapped["pws_id"].map(source_of)).dropna(subset=["source_code"])
    by_zip = mapped.groupby("zip")["source_code"].agg(classify_groundwater)

    index = pd.MultiIndex.from_frame(rows[KEY_COLUMNS])
    flags = by_year.reindex(index)
    fallback = rows["zip"].map(by_zip).to_numpy()
    values = np.where(flags.isna().to_numpy(), fallback, flags.to_numpy())
    return pd.Series(values, index=rows.index, dtype=float)


def _base_rows(
    demographics: pd.DataFrame,
    deaths: pd.DataFrame,
    report: PanelBuildReport,
) -> pd.DataFrame:
    rows = demographics.merge(deaths, on=KEY_COLUMNS, how="inner")

    no_population = rows[POPULATION_COLUMN] <= 0
    for _, r in rows[no_population].iterrows():
        report.excluded_rows.append({"zip": r["zip"], "year": int(r["year"]), "reason": "population_zero"})

    age_total = rows[AGE_COUNT_COLUMNS].sum(axis=1)
    over = age_total > rows[POPULATION_COLUMN] * (1 + AGE_EXCESS_TOLERANCE)
    over &= ~no_population
    for _, r in rows[over].iterrows():
        report.excluded_rows.append({"zip": r["zip"], "year": int(r["year"]), "reason": "age_counts_exceed_population"})

    slight = (age_total > rows[POPULATION_COLUMN]) & ~over & ~no_population
    for _, r in rows[slight].iterrows():
        report.flagged_rows.append({"zip": r["zip"], "year": int(r["year"]), "reason": "age_counts_exceed_population"})

    rows = rows[~(no_population | over)].copy()
    if no_population.any() or over.any():
        logger.warning(
            "panel_rows_excluded",
            population_zero=int(no_population.sum()),
            age_excess=int(over.sum()),
        )
    return rows


def build_panel(
    inputs: RawInputs,
    drop_censored: bool = False,
) -> Tuple[ZipYearPanel, PanelBuildReport]:
    """
    Assemble the zip-year panel from validated raw inputs.

    Concentrations are lower weighted medians over every (PWS, sample) pair that
    reaches a zip through the crosswalk, after LOD imputation. Zip-years without a
    sample of an analyte are left missing.

    Args:
        inputs: Parsed input tables
        drop_censored: Drop death rows flagged as censored instead of keeping them as 0

    Returns:
        Tuple of (panel, build report)
    """
    report = PanelBuildReport(n_samples=len(inputs.samples))

    clash = sorted(set(inputs.samples["analyte"]) & _RESERVED_COLUMNS)
    if clash:
        raise InputDataError(f"Analyte names collide with panel columns: {clash}")

    samples, report.n_imputed = impute_nondetects(inputs.samples, inputs.lods)
    logger.info("nondetects_imputed", imputed=report.n_imputed, samples=len(samples))

    mapped_pws = set(inputs.crosswalk["pws_id"])
    unmapped = sorted(set(samples["pws_id"]) - mapped_pws)
    if unmapped:
        report.unmapped_pws = unmapped
        logger.warning("pws_missing_from_crosswalk", count=len(unmapped), examples=unmapped[:5])

    pairs = _sample_weights(samples, inputs.crosswalk)
    medians = grouped_weighted_median(pairs, ["zip", "year", "analyte"])
    if medians.empty:
        concentrations = pd.DataFrame(index=pd.MultiIndex.from_arrays([[], []], names=KEY_COLUMNS))
    else:
        concentrations = medians.unstack("analyte")

    rows = _base_rows(inputs.demographics, inputs.deaths, report)

    report.censored_rows = int(rows["censored"].sum())
    if drop_censored:
        report.censored_dropped = report.censored_rows
        rows = rows[rows["censored"] == 0]

    rows = rows.sort_values(KEY_COLUMNS, kind="mergesort").reset_index(drop=True)
    rows[AGE_SHARE_COLUMNS] = age_shares(rows[AGE_COUNT_COLUMNS].to_numpy(), rows[POPULATION_COLUMN].to_numpy())
    rows[OFFSET_COLUMN] = np.log(rows[POPULATION_COLUMN].to_numpy())
    rows[GROUNDWATER_COLUMN] = _groundwater_flags(pairs, inputs.crosswalk, inputs.sources, rows)
    report.rows_without_groundwater = int(rows[GROUNDWATER_COLUMN].isna().sum())

    analytes = sorted(samples["analyte"].unique())
    concentrations = concentrations.reindex(columns=analytes)
    index = pd.MultiIndex.from_frame(rows[KEY_COLUMNS])
    exposure = concentrations.reindex(index).reset_index(drop=True)
    exposure.columns = list(analytes)
    frame = pd.concat([rows, exposure], axis=1)

    classes = {a: str(inputs.lods["analyte_class"].get(a, UNCLASSIFIED)) for a in analytes}

    panel = ZipYearPanel(frame=frame, analytes=analytes, analyte_classes=classes)
    panel.validate()

    report.n_rows = panel.n_rows
    report.n_analytes = len(analytes)
    logger.info(
        "panel_built",
        rows=panel.n_rows,
        analytes=len(analytes),
        zips=frame["zip"].nunique(),
        years=frame["year"].nunique(),
    )
    return panel, report
