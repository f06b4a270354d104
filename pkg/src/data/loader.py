"""
Readers for the raw pipeline inputs.

Handles loading and validating:
- Water-quality samples per public water system (PWS)
- Limits of detection, PWS→zip area crosswalk, PWS water sources
- Zip-level demographics and death counts
- Optional regulatory maximum contaminant levels
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from src.data.panel import AGE_ADJUSTED_COLUMN, AGE_COUNT_COLUMNS, UNCLASSIFIED
from src.utils.errors import InputDataError, UnknownSourceCodeError
from src.utils.logging import get_logger


logger = get_logger(__name__)


SOURCE_CODES = frozenset({"GW", "GWP", "GU", "SW", "SWP", "NA"})
CROSSWALK_SUM_TOLERANCE = 1e-9

SAMPLES_COLUMNS = ["pws_id", "analyte", "value"]
LODS_COLUMNS = ["analyte", "lod"]
CROSSWALK_COLUMNS = ["pws_id", "zip", "weight"]
SOURCES_COLUMNS = ["pws_id", "source_code"]
DEMOGRAPHICS_COLUMNS = ["zip", "year", "population", "median_income"] + AGE_COUNT_COLUMNS
DEATHS_COLUMNS = ["zip", "year", "deaths", "censored"]
MCL_COLUMNS = ["analyte", "mcl"]

_ID_DTYPES = {"pws_id": str, "zip": str, "analyte": str}


@dataclass
class RawInputs:
    """All parsed and validated input tables."""

    samples: pd.DataFrame
    lods: pd.DataFrame
    crosswalk: pd.DataFrame
    sources: pd.DataFrame
    demographics: pd.DataFrame
    deaths: pd.DataFrame
    mcl: Optional[pd.DataFrame] = None


def _read_table(path: Path | str, required: Iterable[str], **kwargs) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise InputDataError(f"Input file not found: {path}", {"path": str(path)})

    df = pd.read_csv(path, dtype=_ID_DTYPES, encoding="utf-8", **kwargs)
    df.columns = [c.strip() for c in df.columns]

    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InputDataError(
            f"{path.name} is missing required columns {missing}",
            {"path": str(path), "missing_columns": missing},
        )
    for col in ("pws_id", "zip", "analyte"):
        if col in df.columns:
            df[col] = df[col].str.strip()

    logger.debug("table_loaded", path=str(path), rows=len(df))
    return df


def _numeric(df: pd.DataFrame, column: str, name: str) -> pd.Series:
    values = pd.to_numeric(df[column], errors="coerce")
    if values.isna().any():
        bad = int(values.isna().sum())
        raise InputDataError(
            f"{name}: {bad} non-numeric or missing values in column '{column}'",
            {"table": name, "column": column, "rows": bad},
        )
    return values


def read_samples(
    path: Path | str,
    start_year: Optional[int] = None,
    end_year: Optional[int] = None,
) -> pd.DataFrame:
    """
    Load raw water-quality samples.

    The year is taken from a ``year`` column, or from the calendar year of
    ``sample_date`` when only the date is present. Samples outside the study window
    are dropped.

    Args:
        path: Path to samples.csv
        start_year: First year of the study window (inclusive)
        end_year: Last year of the study window (inclusive)

    Returns:
        DataFrame with pws_id, analyte, year, value
    """
    df = _read_table(path, SAMPLES_COLUMNS)

    if "year" not in df.columns:
        if "sample_date" not in df.columns:
            raise InputDataError("samples.csv needs a 'year' or 'sample_date' column")
        dates = pd.to_datetime(df["sample_date"], errors="coerce")
        if dates.isna().any():
            raise InputDataError(f"samples.csv: {int(dates.isna().sum())} unparseable dates")
        df["year"] = dates.dt.year

    df["year"] = _numeric(df, "year", "samples").astype(int)
    df["value"] = _numeric(df, "value", "samples").astype(float)

    if (df["value"] < 0).any():
        raise InputDataError(
            f"samples.csv: {int((df['value'] < 0).sum())} negative concentrations"
        )

    n_total = len(df)
    if start_year is not None:
        df = df[df["year"] >= start_year]
    if end_year is not None:
        df = df[df["year"] <= end_year]
    if len(df) < n_total:
        logger.info("samples_outside_window_dropped", dropped=n_total - len(df))

    logger.info("samples_loaded", rows=len(df), analytes=df["analyte"].nunique())
    return df[["pws_id", "analyte", "year", "value"]].reset_index(drop=True)


def read_lods(path: Path | str) -> pd.DataFrame:
    """
    Load the limit-of-detection table.

    Returns:
        DataFrame indexed by analyte with columns lod and analyte_class
    """
    df = _read_table(path, LODS_COLUMNS)
    df["lod"] = _numeric(df, "lod", "lods").astype(float)

    if (df["lod"] <= 0).any():
        bad = df.loc[df["lod"] <= 0, "analyte"].tolist()
        raise InputDataError(f"lods.csv: LOD must be strictly positive for {bad}")
    if df["analyte"].duplicated().any():
        dupes = sorted(df.loc[df["analyte"].duplicated(), "analyte"].unique())
        raise InputDataError(f"lods.csv: duplicated analytes {dupes}")

    if "analyte_class" not in df.columns:
        df["analyte_class"] = UNCLASSIFIED
    df["analyte_class"] = df["analyte_class"].fillna(UNCLASSIFIED).astype(str)

    return df.set_index("analyte")[["lod", "analyte_class"]]


def read_crosswalk(path: Path | str) -> pd.DataFrame:
    """
    Load the precomputed PWS→zip area-weight crosswalk.

    Raises:
        InputDataError: On weights outside [0, 1], duplicate pairs, or per-PWS
            weight sums above one
    """
    df = _read_table(path, CROSSWALK_COLUMNS)
    df["weight"] = _numeric(df, "weight", "crosswalk").astype(float)

    if ((df["weight"] < 0) | (df["weight"] > 1)).any():
        raise InputDataError("crosswalk.csv: weights must lie in [0, 1]")
    if df.duplicated(["pws_id", "zip"]).any():
        raise InputDataError("crosswalk.csv: duplicated (pws_id, zip) pairs")

    totals = df.groupby("pws_id")["weight"].sum()
    over = totals[totals > 1 + CROSSWALK_SUM_TOLERANCE]
    if len(over) > 0:
        raise InputDataError(
            f"crosswalk.csv: weights sum above 1 for {len(over)} PWS",
            {"pws_ids": sorted(over.index.tolist())[:20]},
        )

    return df[CROSSWALK_COLUMNS].reset_index(drop=True)


def read_sources(path: Path | str) -> pd.DataFrame:
    """
    Load primary water source codes per PWS.

    "NA" is a legitimate code (private systems), so pandas' default NA parsing is
    disabled for this table.
    """
    df = _read_table(path, SOURCES_COLUMNS, keep_default_na=False)
    df["source_code"] = df["source_code"].astype(str).str.strip().str.upper()

    unknown = sorted(set(df["source_code"]) - SOURCE_CODES)
    if unknown:
        raise UnknownSourceCodeError(
            f"sources.csv: unknown source codes {unknown}", {"codes": unknown}
        )
    if df["pws_id"].duplicated().any():
        raise InputDataError("sources.csv: duplicated pws_id")

    return df[SOURCES_COLUMNS].reset_index(drop=True)


def read_demographics(path: Path | str) -> pd.DataFrame:
    """Load zip-year population, income and age counts."""
    df = _read_table(path, DEMOGRAPHICS_COLUMNS)
    df["year"] = _numeric(df, "year", "demographics").astype(int)
    for col in ["population"] + AGE_COUNT_COLUMNS:
        df[col] = _numeric(df, col, "demographics").astype(float)
        if (df[col] < 0).any():
            raise InputDataError(f"demographics.csv: negative values in '{col}'")
    # income can legitimately be unknown for a zip-year
    df["median_income"] = pd.to_numeric(df["median_income"], errors="coerce")

    if df.duplicated(["zip", "year"]).any():
        raise InputDataError("demographics.csv: duplicated (zip, year) rows")

    return df[DEMOGRAPHICS_COLUMNS].reset_index(drop=True)


def read_deaths(path: Path | str) -> pd.DataFrame:
    """
    Load zip-year all-cause death counts.

    Rows flagged as censored must carry zero deaths. An optional
    ``age_adjusted_rate`` column (per 100k) is kept when present.
    """
    df = _read_table(path, DEATHS_COLUMNS)
    df["year"] = _numeric(df, "year", "deaths").astype(int)
    df["deaths"] = _numeric(df, "deaths", "deaths").astype(float)
    df["censored"] = _numeric(df, "censored", "deaths").astype(int)

    if (df["deaths"] < 0).any():
        raise InputDataError("deaths.csv: negative death counts")
    if not df["censored"].isin([0, 1]).all():
        raise InputDataError("deaths.csv: censored must be 0 or 1")
    bad = (df["censored"] == 1) & (df["deaths"] != 0)
    if bad.any():
        raise InputDataError(
            f"deaths.csv: {int(bad.sum())} censored rows with non-zero deaths"
        )
    if df.duplicated(["zip", "year"]).any():
        raise InputDataError("deaths.csv: duplicated (zip, year) rows")

    columns = list(DEATHS_COLUMNS)
    if AGE_ADJUSTED_COLUMN in df.columns:
        df[AGE_ADJUSTED_COLUMN] = pd.to_numeric(df[AGE_ADJUSTED_COLUMN], errors="coerce")
        columns.append(AGE_ADJUSTED_COLUMN)

    return df[columns].reset_index(drop=True)


def read_mcl(path: Optional[Path | str]) -> Optional[pd.DataFrame]:
    """Load optional regulatory maximum contaminant levels (analyte, mcl)."""
    if path is None or not Path(path).exists():
        return None
    df = _read_table(path, MCL_COLUMNS)
    df["mcl"] = pd.to_numeric(df["mcl"], errors="coerce")
    return df.dropna(subset=["mcl"]).set_index("analyte")[["mcl"]]


def load_inputs(
    directory: Path | str,
    files: Optional[dict] = None,
    start_year: Optional[int] = None,
    end_year: Optional[int] = None,
) -> RawInputs:
    """
    Load every input table from a directory.

    Args:
        directory: Directory holding the input CSVs
        files: Optional mapping of table name → file name overrides
        start_year: First year of the study window
        end_year: Last year of the study window

    Returns:
        RawInputs with all tables validated
    """
    directory = Path(directory)
    names = {
        "samples": "samples.csv",
        "lods": "lods.csv",
        "crosswalk": "crosswalk.csv",
        "sources": "sources.csv",
        "demographics": "demographics.csv",
        "deaths": "deaths.csv",
        "mcl": "mcl.csv",
    }
    names.update(files or {})

    def resolve(key: str) -> Path:
        candidate = Path(names[key])
        return candidate if candidate.is_absolute() else directory / candidate

    logger.info("loading_inputs", directory=str(directory))

    demographics = read_demographics(resolve("demographics"))
    deaths = read_deaths(resolve("deaths"))
    window = np.ones(len(demographics), dtype=bool)
    if start_year is not None:
        window &= demographics["year"].to_numpy() >= start_year
    if end_year is not None:
        window &= demographics["year"].to_numpy() <= end_year
    demographics = demographics[window].reset_index(drop=True)

    return RawInputs(
        samples=read_samples(resolve("samples"), start_year, end_year),
        lods=read_lods(resolve("lods")),
        crosswalk=read_crosswalk(resolve("crosswalk")),
        sources=read_sources(resolve("sources")),
        demographics=demographics,
        deaths=deaths,
        mcl=read_mcl(resolve("mcl")),
    )
