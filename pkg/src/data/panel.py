"""
The zip-code × year analysis panel and its on-disk form.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from src.utils.errors import InputDataError


KEY_COLUMNS = ["zip", "year"]
OUTCOME_COLUMN = "deaths"
POPULATION_COLUMN = "population"
OFFSET_COLUMN = "log_population"
AGE_ADJUSTED_COLUMN = "age_adjusted_rate"

AGE_COUNT_COLUMNS = ["age_u5", "age_5_14", "age_15_24", "age_25_64", "age_65p"]
AGE_SHARE_COLUMNS = ["pct_u5", "pct_5_14", "pct_15_24", "pct_25_64", "pct_65p"]

INCOME_COLUMN = "median_income"
GROUNDWATER_COLUMN = "groundwater"
PRIMARY_COVARIATES = [INCOME_COLUMN, GROUNDWATER_COLUMN] + AGE_SHARE_COLUMNS

UNCLASSIFIED = "Unclassified"

PANEL_FILE = "panel.parquet"
META_FILE = "panel_meta.json"


@dataclass
class ZipYearPanel:
    """One row per (zip, year) with outcome, offset, covariates and analyte columns.

    ``scaling`` maps each standardized analyte to the (mean, sd) used, so values can be
    mapped back to native units. It is empty until the panel has been prepared.
    """

    frame: pd.DataFrame
    analytes: List[str]
    analyte_classes: Dict[str, str] = field(default_factory=dict)
    scaling: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        missing = [a for a in self.analytes if a not in self.frame.columns]
        if missing:
            raise InputDataError(f"Analyte columns missing from panel: {missing}")

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def analyte_class(self, analyte: str) -> str:
        return self.analyte_classes.get(analyte, UNCLASSIFIED)

    def to_native_units(self, analyte: str, values: np.ndarray) -> np.ndarray:
        """Map standardized values of an analyte back to its native units."""
        if analyte not in self.scaling:
            return np.asarray(values, dtype=float)
        mean, sd = self.scaling[analyte]
        return mean + sd * np.asarray(values, dtype=float)

    def validate(self) -> None:
        """Check the panel invariants: unique keys, positive population."""
        if self.frame.duplicated(KEY_COLUMNS).any():
            raise InputDataError("Panel contains duplicated (zip, year) rows")
        if (self.frame[POPULATION_COLUMN] <= 0).any():
            raise InputDataError("Panel contains rows with non-positive population")

    def with_frame(self, frame: pd.DataFrame) -> "ZipYearPanel":
        """Copy of this panel's metadata around a new frame."""
        return ZipYearPanel(
            frame=frame,
            analytes=list(self.analytes),
            analyte_classes=dict(self.analyte_classes),
            scaling=dict(self.scaling),
        )

    def save(self, directory: Path | str) -> List[Path]:
        """Write ``panel.parquet`` and ``panel_meta.json`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)

        panel_path = directory / PANEL_FILE
        self.frame.to_parquet(panel_path, index=False)

        meta = {
            "analytes": self.analytes,
            "analyte_classes": self.analyte_classes,
            "scaling": {k: [float(v[0]), float(v[1])] for k, v in self.scaling.items()},
        }
        meta_path = directory / META_FILE
        with open(meta_path, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)

        return [panel_path, meta_path]

    @classmethod
    def load(cls, directory: Path | str) -> "ZipYearPanel":
        """Load a panel written by :meth:`save`."""
        directory = Path(directory)
        panel_path = directory / PANEL_FILE
        meta_path = directory / META_FILE
        if not panel_path.exists() or not meta_path.exists():
            raise FileNotFoundError(f"No panel found in {directory}")

        frame = pd.read_parquet(panel_path)
        frame["zip"] = frame["zip"].astype(str)
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)

        return cls(
            frame=frame,
            analytes=list(meta["analytes"]),
            analyte_classes=dict(meta.get("analyte_classes", {})),
            scaling={k: (float(v[0]), float(v[1])) for k, v in meta.get("scaling", {}).items()},
        )

    @staticmethod
    def exists(directory: Path | str) -> bool:
        directory = Path(directory)
        return (directory / PANEL_FILE).exists() and (directory / META_FILE).exists()
