"""
Synthetic zip-year panels with planted effects.

Every random draw comes from a Philox stream keyed by (seed, stream, zip), so the
panel does not depend on the order in which zips are generated.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.data.panel import (
    AGE_ADJUSTED_COLUMN,
    AGE_COUNT_COLUMNS,
    AGE_SHARE_COLUMNS,
    GROUNDWATER_COLUMN,
    INCOME_COLUMN,
    OFFSET_COLUMN,
    OUTCOME_COLUMN,
    POPULATION_COLUMN,
    ZipYearPanel,
)
from src.mixtures.qgcomp import quantize
from src.utils.logging import get_logger


logger = get_logger(__name__)


_ZIP_STREAM = 1
_OUTCOME_STREAM = 2
_GLOBAL_STREAM = 3

MIN_BURN_IN_YEARS = 2
RAW_SHIFT = 10.0
MINOR_PWS_WEIGHT = 1e-6


@dataclass
class SynthSpec:
    """Shape and planted truth of a synthetic panel.

    ``beta`` gives the contemporaneous per-SD effect of each analyte (zeros when
    empty). ``lag_effects`` maps an analyte to its effects at lags 1, 2, ...;
    ``quartile_effects`` maps an analyte to a per-quartile-score effect.
    """

    n_zips: int = 150
    n_years: int = 11
    start_year: int = 2012
    n_analytes: int = 20
    beta: List[float] = field(default_factory=list)
    lag_effects: Dict[str, List[float]] = field(default_factory=dict)
    quartile_effects: Dict[str, float] = field(default_factory=dict)
    gamma: Dict[str, float] = field(
        default_factory=lambda: {INCOME_COLUMN: -2e-6, GROUNDWATER_COLUMN: 0.02, "pct_65p": 0.02}
    )
    base_log_rate: float = -4.9
    zip_fe_sd: float = 0.3
    year_fe_sd: float = 0.05
    zip_exposure_share: float = 0.5
    exposure_block_size: int = 5
    exposure_correlation: float = 0.0
    missing_rate: float = 0.1
    censor_threshold: int = 0
    mean_population: float = 20_000.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n_zips, self.n_years, self.n_analytes) < 1:
            raise ValueError("n_zips, n_years and n_analytes must all be at least 1")
        if self.beta and len(self.beta) != self.n_analytes:
            raise ValueError("beta must have one entry per analyte")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if not 0 <= self.exposure_correlation < 1:
            raise ValueError("exposure_correlation must lie in [0, 1)")
        unknown = sorted((set(self.lag_effects) | set(self.quartile_effects)) - set(self.analytes))
        if unknown:
            raise ValueError(f"lag_effects and quartile_effects name unknown analytes: {unknown}")

    @property
    def burn_in(self) -> int:
        """Years drawn before the panel window, enough for the longest planted lag."""
        longest = max((len(effects) for effects in self.lag_effects.values()), default=0)
        return max(MIN_BURN_IN_YEARS, longest)

    @property
    def analytes(self) -> List[str]:
        width = max(2, len(str(self.n_analytes)))
        return [f"A{j + 1:0{width}d}" for j in range(self.n_analytes)]

    @property
    def zips(self) -> List[str]:
        return [f"{90000 + i:05d}" for i in range(self.n_zips)]

    @property
    def years(self) -> List[int]:
        return list(range(self.start_year, self.start_year + self.n_years))

    def planted_beta(self) -> Dict[str, float]:
        values = self.beta or [0.0] * self.n_analytes
        return dict(zip(self.analytes, map(float, values)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthTruth:
    """Generative parameters behind a synthetic panel."""

    beta: Dict[str, float]
    gamma: Dict[str, float]
    alpha: pd.Series
    delta: pd.Series
    base_log_rate: float
    lag_effects: Dict[str, List[float]]
    quartile_effects: Dict[str, float]
    scales: Dict[str, float]
    expected: np.ndarray = field(repr=False, default=None)


def _stream(seed: int, stream: int, key: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, key])))


def _zip_draws(spec: SynthSpec, zip_index: int) -> dict:
    """Everything about one zip except its death counts."""
    rng = _stream(spec.seed, _ZIP_STREAM, zip_index)
    T = spec.n_years + spec.burn_in
    A = spec.n_analytes
    n_blocks = -(-A // spec.exposure_block_size)

    alpha = rng.normal(0.0, spec.zip_fe_sd)
    population = rng.lognormal(np.log(spec.mean_population), 0.6) * np.exp(
        rng.normal(0.0, 0.01) * np.arange(spec.n_years)
    )
    population = np.maximum(np.round(population), 50.0)
    income = rng.lognormal(np.log(60_000), 0.3) * np.exp(rng.normal(0.0, 0.02, spec.n_years))

    share_base = rng.dirichlet([6.0, 12.0, 13.0, 52.0, 17.0])
    shares = np.array([rng.dirichlet(share_base * 400.0) for _ in range(spec.n_years)])

    groundwater_base = rng.uniform() < 0.4
    flips = rng.uniform(size=spec.n_years) < 0.1
    groundwater = np.where(flips, ~groundwater_base, groundwater_base).astype(float)

    persistent = rng.normal(size=A)
    common = rng.normal(size=(T, n_blocks))
    idiosyncratic = rng.normal(size=(T, A))
    block_of = np.arange(A) // spec.exposure_block_size
    rho = spec.exposure_correlation
    within = np.sqrt(rho) * common[:, block_of] + np.sqrt(1.0 - rho) * idiosyncratic
    latent = np.sqrt(spec.zip_exposure_share) * persistent + np.sqrt(1.0 - spec.zip_exposure_share) * within

    missing = rng.uniform(size=(spec.n_years, A)) < spec.missing_rate

    return {
        "alpha": alpha,
        "population": population,
        "income": income,
        "shares": shares,
        "groundwater": groundwater,
        "latent": latent,
        "missing": missing,
    }


def _age_counts(shares: np.ndarray, population: np.ndarray) -> np.ndarray:
    counts = np.floor(shares[:, :-1] * population[:, None])
    last = population - counts.sum(axis=1)
    return np.column_stack([counts, last])


def generate_panel(spec: SynthSpec) -> Tuple[ZipYearPanel, SynthTruth]:
    """
    Draw a panel from the planted Poisson model.

    Exposures are standardized over their observed cells before entering the linear
    predictor, so a planted beta is the per-SD effect the screen estimates. Raw
    concentrations are an analyte-specific positive rescaling of the latent values.

    Returns:
        Tuple of (raw zip-year panel, generative truth)
    """
    analytes = spec.analytes
    zips = spec.zips
    years = np.array(spec.years)
    Z, Y, A = spec.n_zips, spec.n_years, spec.n_analytes
    burn_in = spec.burn_in

    global_rng = _stream(spec.seed, _GLOBAL_STREAM)
    delta = global_rng.normal(0.0, spec.year_fe_sd, Y)
    scales = 10.0 ** global_rng.uniform(-2.0, 1.0, A)

    draws = [_zip_draws(spec, i) for i in range(Z)]
    latent = np.stack([d["latent"] for d in draws])  # (Z, Y + burn-in, A)
    missing = np.stack([d["missing"] for d in draws])  # (Z, Y, A)

    window = latent[:, burn_in:, :]
    observed = np.where(missing, np.nan, window)
    means = np.nanmean(observed.reshape(-1, A), axis=0)
    sds = np.nanstd(observed.reshape(-1, A), axis=0, ddof=1)
    standardized = (latent - means) / sds

    population = np.stack([d["population"] for d in draws])
    income = np.stack([d["income"] for d in draws])
    shares = np.stack([d["shares"] for d in draws])
    groundwater = np.stack([d["groundwater"] for d in draws])
    alpha = np.array([d["alpha"] for d in draws])

    counts = np.stack([_age_counts(shares[i], population[i]) for i in range(Z)])
    pct = counts / population[:, :, None] * 100.0

    beta = spec.planted_beta()
    eta = np.log(population) + spec.base_log_rate + alpha[:, None] + delta[None, :]
    current = standardized[:, burn_in:, :]
    eta = eta + current @ np.array([beta[a] for a in analytes])
    for analyte, effects in spec.lag_effects.items():
        j = analytes.index(analyte)
        for lag, effect in enumerate(effects, start=1):
            eta = eta + effect * standardized[:, burn_in - lag : burn_in - lag + Y, j]
    for analyte, effect in spec.quartile_effects.items():
        j = analytes.index(analyte)
        scores = quantize(current[:, :, j].ravel()).reshape(Z, Y)
        eta = eta + effect * scores

    covariate_values = {
        INCOME_COLUMN: income,
        GROUNDWATER_COLUMN: groundwater,
        **{col: pct[:, :, k] for k, col in enumerate(AGE_SHARE_COLUMNS)},
    }
    for name, effect in spec.gamma.items():
        eta = eta + effect * covariate_values[name]
    expected = np.exp(eta)

    deaths = np.stack([_stream(spec.seed, _OUTCOME_STREAM, i).poisson(expected[i]) for i in range(Z)]).astype(float)
    censored = deaths < spec.censor_threshold
    deaths[censored] = 0.0

    # Age-adjusted rate: crude rate with the planted age-structure term removed
    age_effect = sum(
        spec.gamma.get(col, 0.0) * (pct[:, :, k] - pct[:, :, k].mean()) for k, col in enumerate(AGE_SHARE_COLUMNS)
    )
    age_adjusted = deaths / population * 1e5 * np.exp(-age_effect)

    raw = scales * (window + RAW_SHIFT)
    raw = np.where(missing, np.nan, raw)

    rows = {
        "zip": np.repeat(zips, Y),
        "year": np.tile(years, Z),
        POPULATION_COLUMN: population.ravel(),
        INCOME_COLUMN: income.ravel(),
        **{col: counts[:, :, k].ravel() for k, col in enumerate(AGE_COUNT_COLUMNS)},
        OUTCOME_COLUMN: deaths.ravel(),
        "censored": censored.ravel().astype(int),
        AGE_ADJUSTED_COLUMN: age_adjusted.ravel(),
        **{col: pct[:, :, k].ravel() for k, col in enumerate(AGE_SHARE_COLUMNS)},
        OFFSET_COLUMN: np.log(population).ravel(),
        GROUNDWATER_COLUMN: groundwater.ravel(),
    }
    frame = pd.DataFrame(rows)
    for j, analyte in enumerate(analytes):
        frame[analyte] = raw[:, :, j].ravel()

    classes = {a: f"Class {j // spec.exposure_block_size + 1}" for j, a in enumerate(analytes)}
    panel = ZipYearPanel(frame=frame, analytes=list(analytes), analyte_classes=classes)

    truth = SynthTruth(
        beta=beta,
        gamma=dict(spec.gamma),
        alpha=pd.Series(alpha, index=zips, name="alpha"),
        delta=pd.Series(delta, index=years, name="delta"),
        base_log_rate=spec.base_log_rate,
        lag_effects={k: list(v) for k, v in spec.lag_effects.items()},
        quartile_effects=dict(spec.quartile_effects),
        scales=dict(zip(analytes, scales.tolist())),
        expected=expected.ravel(),
    )
    logger.info("synthetic_panel_generated", zips=Z, years=Y, analytes=A, seed=spec.seed, deaths=float(deaths.sum()))
    return panel, truth


def write_inputs(panel: ZipYearPanel, truth: SynthTruth, directory: Path | str) -> List[Path]:
    """
    Write the raw input CSVs that ingest turns back into ``panel``.

    Each zip is served by one surface-water system with area weight 1. In years the zip
    is flagged as groundwater, a second groundwater system with negligible weight reports
    copies of the same samples, so the weighted medians are unchanged.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame = panel.frame
    analytes = list(panel.analytes)

    long = frame.melt(id_vars=["zip", "year"], value_vars=analytes, var_name="analyte", value_name="value")
    long = long.dropna(subset=["value"])
    main = long.assign(pws_id="S" + long["zip"])
    gw_years = frame.loc[frame[GROUNDWATER_COLUMN] == 1, ["zip", "year"]]
    minor = long.merge(gw_years, on=["zip", "year"]).assign(pws_id=lambda d: "G" + d["zip"])
    samples = pd.concat([main, minor], ignore_index=True)[["pws_id", "analyte", "year", "value"]]
    samples = samples.sort_values(["pws_id", "analyte", "year"], kind="mergesort")

    zips = sorted(frame["zip"].unique())
    crosswalk = pd.DataFrame(
        {
            "pws_id": ["S" + z for z in zips] + ["G" + z for z in zips],
            "zip": zips + zips,
            "weight": [1.0] * len(zips) + [MINOR_PWS_WEIGHT] * len(zips),
        }
    )
    sources = pd.DataFrame(
        {"pws_id": crosswalk["pws_id"], "source_code": ["SW"] * len(zips) + ["GW"] * len(zips)}
    )
    lods = pd.DataFrame(
        {
            "analyte": analytes,
            "lod": [truth.scales.get(a, 1.0) * 0.01 for a in analytes],
            "analyte_class": [panel.analyte_class(a) for a in analytes],
        }
    )
    demographics = frame[["zip", "year", POPULATION_COLUMN, INCOME_COLUMN] + AGE_COUNT_COLUMNS]
    deaths = frame[["zip", "year", OUTCOME_COLUMN, "censored", AGE_ADJUSTED_COLUMN]]

    tables = {
        "samples.csv": samples,
        "lods.csv": lods,
        "crosswalk.csv": crosswalk,
        "sources.csv": sources,
        "demographics.csv": demographics,
        "deaths.csv": deaths,
    }
    paths = []
    for name, table in tables.items():
        path = directory / name
        table.to_csv(path, index=False, float_format="%.17g")
        paths.append(path)
    logger.info("synthetic_inputs_written", directory=str(directory), samples=len(samples))
    return paths
