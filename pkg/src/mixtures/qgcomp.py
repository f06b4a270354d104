"""
Quantile g-computation for exposure mixtures.

Each component is cut into quantile scores, the scores are summed into one index and
the index enters a zip fixed-effects Poisson model with a smooth year trend. The index
is divided by the number of components, so its coefficient is the effect of raising
every component by one quantile at once.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import patsy
from scipy.stats import norm

from src.data.panel import PRIMARY_COVARIATES, ZipYearPanel
from src.regression.feglm import Z_95, FitOptions, RegressionSpec, complete_rows, fit_poisson_fe, rate_increase
from src.utils.errors import ConfigError, EstimationError, WaterWasError
from src.utils.logging import get_logger


logger = get_logger(__name__)


INDEX_COLUMN = "mixture_index"
DEFAULT_MIXTURES_PATH = Path(__file__).parent.parent.parent / "config" / "mixtures.json"

RESULT_COLUMNS = [
    "mixture", "n_components", "components", "missing_components", "psi", "se",
    "increase_pct", "ci_lo", "ci_hi", "p_value", "n_obs", "clustered", "error",
]


@dataclass
class MixtureSpec:
    """A named set of analytes treated as one mixture."""

    name: str
    analytes: List[str]

    def __post_init__(self) -> None:
        if not self.analytes:
            raise ValueError(f"Mixture '{self.name}' has no analytes")


@dataclass
class QgcompSettings:
    q: int = 4
    year_df: int = 4
    clustered: bool = True
    covariates: List[str] = field(default_factory=lambda: list(PRIMARY_COVARIATES))
    options: FitOptions = field(default_factory=FitOptions)


@dataclass
class MixtureResult:
    """Joint effect of one mixture per one-quantile rise of all components."""

    name: str
    analytes: List[str]
    missing: List[str]
    psi: float
    se: float
    p_value: float
    n_obs: int
    q: int
    clustered: bool

    @property
    def increase(self):
        return rate_increase(self.psi, self.se)

    def curve(self) -> pd.DataFrame:
        """Predicted rate ratio relative to the lowest quantile, exp(psi * j)."""
        j = np.arange(self.q)
        return pd.DataFrame(
            {
                "mixture": self.name,
                "quantile": j,
                "rate_ratio": np.exp(self.psi * j),
                "ci_lo": np.exp((self.psi - Z_95 * self.se) * j),
                "ci_hi": np.exp((self.psi + Z_95 * self.se) * j),
            }
        )

    def to_dict(self) -> dict:
        change = self.increase
        return {
            "mixture": self.name,
            "n_components": len(self.analytes),
            "components": ";".join(self.analytes),
            "missing_components": ";".join(self.missing),
            "psi": self.psi,
            "se": self.se,
            "increase_pct": change.increase_pct,
            "ci_lo": change.ci_lo,
            "ci_hi": change.ci_hi,
            "p_value": self.p_value,
            "n_obs": self.n_obs,
            "clustered": int(self.clustered),
            "error": "",
        }


def load_mixture_specs(path: Path | str = DEFAULT_MIXTURES_PATH) -> List[MixtureSpec]:
    """Read mixture definitions: ``{"mixtures": [{"name": ..., "analytes": [...]}]}``."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Mixture file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid mixture file {path}: {e}") from e

    try:
        specs = [MixtureSpec(name=m["name"], analytes=list(m["analytes"])) for m in data["mixtures"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid mixture definition in {path}: {e}") from e

    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"Duplicated mixture names in {path}")
    return specs


def save_mixture_specs(specs: Sequence[MixtureSpec], path: Path | str) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"mixtures": [asdict(s) for s in specs]}, f, indent=2)
        f.write("\n")
    return path


def quantize(column: pd.Series | np.ndarray, q: int = 4) -> np.ndarray:
    """
    Quantile scores 0..q-1.

    Breakpoints are the linear-interpolation empirical quantiles k/q, k = 1..q-1; a
    value's score is the number of breakpoints strictly below it. Missing values stay
    missing.
    """
    values = np.asarray(column, dtype=float)
    observed = values[np.isfinite(values)]
    if observed.size < q:
        raise ValueError(f"quantize needs at least {q} observed values, got {observed.size}")

    breaks = np.quantile(observed, np.arange(1, q) / q, method="linear")
    if observed.min() == observed.max():
        logger.warning("quantize_constant_column", n=int(observed.size))

    scores = np.full(values.shape, np.nan)
    finite = np.isfinite(values)
    scores[finite] = np.searchsorted(breaks, values[finite], side="left")
    return scores


def mixture_index(data: pd.DataFrame, analytes: Sequence[str], q: int = 4) -> np.ndarray:
    """Sum of the components' quantile scores divided by the number of components."""
    index = np.zeros(len(data))
    for analyte in analytes:
        index += quantize(data[analyte], q)
    return index / len(analytes)


def year_spline(years: pd.Series, df: int) -> pd.DataFrame:
    """Centred natural cubic regression spline of the year index."""
    data = pd.DataFrame({"year_index": (years - years.min()).to_numpy(dtype=float)})
    basis = patsy.dmatrix(
        f"cr(year_index, df={df}, constraints='center') - 1", data, return_type="dataframe"
    )
    basis.columns = [f"year_spline_{k}" for k in range(basis.shape[1])]
    basis.index = years.index
    return basis


def qgcomp_fit(
    spec: MixtureSpec,
    panel: ZipYearPanel,
    settings: Optional[QgcompSettings] = None,
) -> MixtureResult:
    """
    Fit one mixture.

    Components absent from the panel are dropped and reported. The year factor is
    replaced by a spline with ``min(year_df, n_years - 2)`` degrees of freedom; with
    fewer than two available the year fixed effect is kept instead.

    Raises:
        EstimationError: When fewer than min(2, |mixture|) components are available
    """
    settings = settings or QgcompSettings()
    available = [a for a in spec.analytes if a in panel.analytes]
    missing = [a for a in spec.analytes if a not in available]
    if missing:
        logger.warning("mixture_components_missing", mixture=spec.name, missing=missing)
    if len(available) < min(2, len(spec.analytes)):
        raise EstimationError(
            f"Mixture '{spec.name}' has {len(available)} available components",
            {"mixture": spec.name, "missing": missing},
        )

    frame = panel.frame
    # Rows complete for the whole mixture and all model columns
    base = RegressionSpec(exposures=available, covariates=list(settings.covariates))
    data = frame[complete_rows(frame, base)].copy()

    data[INDEX_COLUMN] = mixture_index(data, available, settings.q)

    n_years = int(data["year"].nunique())
    df = min(settings.year_df, n_years - 2)
    if df >= 2:
        spline = year_spline(data["year"], df)
        data = pd.concat([data, spline], axis=1)
        covariates = list(settings.covariates) + list(spline.columns)
        fixed_effects = ["zip"]
    else:
        covariates = list(settings.covariates)
        fixed_effects = ["zip", "year"]

    model = RegressionSpec(
        exposures=[INDEX_COLUMN],
        covariates=covariates,
        fixed_effects=fixed_effects,
        cluster="zip" if settings.clustered else None,
    )
    fit = fit_poisson_fe(model, data, settings.options)

    psi = fit.coef_of(INDEX_COLUMN)
    i = fit.index(INDEX_COLUMN)
    variance = fit.vcov[i, i] if settings.clustered else fit.vcov_model[i, i]
    se = float(np.sqrt(variance))
    p_value = float(2.0 * norm.sf(abs(psi / se)))

    logger.info("mixture_fitted", mixture=spec.name, psi=round(psi, 6), se=round(se, 6), n_obs=fit.n_obs)
    return MixtureResult(
        name=spec.name,
        analytes=available,
        missing=missing,
        psi=psi,
        se=se,
        p_value=p_value,
        n_obs=fit.n_obs,
        q=settings.q,
        clustered=settings.clustered,
    )


def run_mixtures(
    specs: Sequence[MixtureSpec],
    panel: ZipYearPanel,
    settings: Optional[QgcompSettings] = None,
    map_fn: Callable = map,
) -> Tuple[pd.DataFrame, List[MixtureResult]]:
    """Fit every mixture; a failing mixture is reported in its row."""

    def one(spec: MixtureSpec):
        try:
            return qgcomp_fit(spec, panel, settings)
        except (WaterWasError, ValueError, KeyError) as e:
            logger.warning("mixture_failed", mixture=spec.name, error=str(e))
            return spec, str(e)

    rows, results = [], []
    for outcome in map_fn(one, list(specs)):
        if isinstance(outcome, MixtureResult):
            rows.append(outcome.to_dict())
            results.append(outcome)
        else:
            spec, error = outcome
            row = {c: float("nan") for c in RESULT_COLUMNS}
            row.update(
                {
                    "mixture": spec.name,
                    "n_components": 0,
                    "components": "",
                    "missing_components": "",
                    "clustered": int(settings.clustered if settings else True),
                    "error": error,
                }
            )
            rows.append(row)
    return pd.DataFrame(rows, columns=RESULT_COLUMNS), results
