"""
Validated run configuration.

Every section has defaults, so an empty YAML file is a valid configuration. The
resolved model is echoed into report.json and config_echo.yaml.
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.data.panel import PRIMARY_COVARIATES
from src.data.panelprep import DEFAULT_FREQ_CUT, DEFAULT_MISSING_THRESHOLD, DEFAULT_UNIQUE_CUT
from src.doseresponse.pspline import DoseResponseSettings
from src.mixtures.qgcomp import DEFAULT_MIXTURES_PATH, QgcompSettings
from src.regression.feglm import FitOptions
from src.screening.screen import ScreeningSettings
from src.synth.generator import SynthSpec
from src.utils.errors import ConfigError


THREADS_ENV = "WATERWAS_THREADS"


def default_threads() -> int:
    raw = os.getenv(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'")
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1, got {value}")
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InputsConfig(_Section):
    """Where the raw CSVs live. ``directory`` defaults to the synth stage's output."""

    directory: Optional[Path] = None
    files: Dict[str, str] = Field(default_factory=dict)

    @field_validator("files")
    @classmethod
    def _known_tables(cls, value: Dict[str, str]) -> Dict[str, str]:
        known = {"samples", "lods", "crosswalk", "sources", "demographics", "deaths", "mcl"}
        unknown = set(value) - known
        if unknown:
            raise ValueError(f"unknown input tables: {sorted(unknown)}")
        return value


class PanelConfig(_Section):
    start_year: int = 2012
    end_year: int = 2022
    drop_censored: bool = False
    missing_threshold: float = Field(default=DEFAULT_MISSING_THRESHOLD, gt=0, le=1)
    freq_cut: float = Field(default=DEFAULT_FREQ_CUT, ge=1)
    unique_cut: float = Field(default=DEFAULT_UNIQUE_CUT, ge=0, le=100)

    @model_validator(mode="after")
    def _window(self) -> "PanelConfig":
        if self.start_year > self.end_year:
            raise ValueError(f"start_year {self.start_year} is after end_year {self.end_year}")
        return self


class FitConfig(_Section):
    tol: float = Field(default=1e-9, gt=0, lt=1)
    max_iter: int = Field(default=100, ge=1)
    demean_tol: float = Field(default=1e-10, gt=0, lt=1)
    demean_max_iter: int = Field(default=10_000, ge=1)
    collinearity_tol: float = Field(default=1e-10, gt=0, lt=1)
    small_sample_correction: bool = False

    def to_options(self) -> FitOptions:
        return FitOptions(**self.model_dump())


class ScreeningConfig(_Section):
    alpha: float = Field(default=0.05, gt=0, lt=1)
    ladder_alpha: float = Field(default=0.05, gt=0, lt=1)
    covariates: List[str] = Field(default_factory=lambda: list(PRIMARY_COVARIATES))
    cluster: Optional[str] = "zip"
    run_ladder: bool = True
    attribution: Literal["retained", "significant", "all"] = "significant"
    attribution_clip: bool = True


class LagleadConfig(_Section):
    lags: List[int] = Field(default_factory=lambda: [0, 1, 2])
    lead: Optional[int] = Field(default=1, ge=1)
    analytes: Optional[List[str]] = None

    @field_validator("lags")
    @classmethod
    def _lags(cls, value: List[int]) -> List[int]:
        if not value or any(lag < 0 for lag in value) or len(set(value)) != len(value):
            raise ValueError("lags must be a non-empty list of distinct non-negative integers")
        return sorted(value)


class MixturesConfig(_Section):
    network_threshold: float = Field(default=0.3, ge=0, lt=1)
    min_pair_rows: int = Field(default=3, ge=2)
    mds_dims: int = Field(default=2, ge=1)
    quantiles: int = Field(default=4, ge=2)
    year_df: int = Field(default=4, ge=1)
    clustered: bool = True
    definitions: Path = DEFAULT_MIXTURES_PATH


class DoseResponseConfig(_Section):
    """``analytes: null`` fits every analyte the screen retained."""

    analytes: Optional[List[str]] = None
    n_knots: int = Field(default=20, ge=1)
    degree: int = Field(default=3, ge=1, le=5)
    lam: Optional[float] = Field(default=None, gt=0)
    n_lambda: int = Field(default=40, ge=1)
    lambda_min: float = Field(default=1e-4, gt=0)
    lambda_max: float = Field(default=1e8, gt=0)
    n_grid: int = Field(default=200, ge=2)
    top_quantile: float = Field(default=0.99, gt=0, le=1)

    @model_validator(mode="after")
    def _grid(self) -> "DoseResponseConfig":
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")
        return self


class SynthConfig(_Section):
    n_zips: int = Field(default=150, ge=1)
    n_years: int = Field(default=11, ge=1)
    start_year: int = 2012
    n_analytes: int = Field(default=20, ge=1)
    beta: List[float] = Field(default_factory=list)
    lag_effects: Dict[str, List[float]] = Field(default_factory=dict)
    quartile_effects: Dict[str, float] = Field(default_factory=dict)
    base_log_rate: float = -4.9
    zip_fe_sd: float = Field(default=0.3, ge=0)
    year_fe_sd: float = Field(default=0.05, ge=0)
    exposure_block_size: int = Field(default=5, ge=1)
    exposure_correlation: float = Field(default=0.0, ge=0, lt=1)
    missing_rate: float = Field(default=0.1, ge=0, lt=1)
    censor_threshold: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0)

    def to_spec(self) -> SynthSpec:
        try:
            return SynthSpec(**self.model_dump())
        except ValueError as e:
            raise ConfigError(f"Invalid synth section: {e}")


class RuntimeConfig(_Section):
    output_dir: Path = Path("outputs")
    threads: int = Field(default_factory=default_threads, ge=1)


class LoggingConfig(_Section):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    format: Literal["text", "json"] = "text"

    @field_validator("level", mode="before")
    @classmethod
    def _upper(cls, value: Any) -> Any:
        return value.upper() if isinstance(value, str) else value


class RunConfig(_Section):
    """Fully-resolved configuration of one pipeline invocation."""

    inputs: InputsConfig = Field(default_factory=InputsConfig)
    panel: PanelConfig = Field(default_factory=PanelConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    screening: ScreeningConfig = Field(default_factory=ScreeningConfig)
    laglead: LagleadConfig = Field(default_factory=LagleadConfig)
    mixtures: MixturesConfig = Field(default_factory=MixturesConfig)
    doseresponse: DoseResponseConfig = Field(default_factory=DoseResponseConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @property
    def output_dir(self) -> Path:
        return self.runtime.output_dir

    @property
    def input_dir(self) -> Path:
        return self.inputs.directory or self.output_dir / "inputs"

    def screening_settings(self) -> ScreeningSettings:
        return ScreeningSettings(
            alpha=self.screening.alpha,
            ladder_alpha=self.screening.ladder_alpha,
            covariates=list(self.screening.covariates),
            cluster=self.screening.cluster,
            lags=list(self.laglead.lags),
            lead=self.laglead.lead,
            options=self.fit.to_options(),
        )

    def qgcomp_settings(self) -> QgcompSettings:
        return QgcompSettings(
            q=self.mixtures.quantiles,
            year_df=self.mixtures.year_df,
            clustered=self.mixtures.clustered,
            covariates=list(self.screening.covariates),
            options=self.fit.to_options(),
        )

    def doseresponse_settings(self) -> DoseResponseSettings:
        section = self.doseresponse
        return DoseResponseSettings(
            n_knots=section.n_knots,
            degree=section.degree,
            lam=section.lam,
            n_lambda=section.n_lambda,
            lambda_min=section.lambda_min,
            lambda_max=section.lambda_max,
            n_grid=section.n_grid,
            top_quantile=section.top_quantile,
            covariates=list(self.screening.covariates),
            options=self.fit.to_options(),
        )

    def echo(self) -> Dict[str, Any]:
        """JSON-safe dump that :func:`build_run_config` accepts back unchanged."""
        return self.model_dump(mode="json")


def build_run_config(raw: Dict[str, Any]) -> RunConfig:
    """
    Validate a configuration dictionary.

    Raises:
        ConfigError: Listing every invalid field
    """
    try:
        return RunConfig.model_validate(raw or {})
    except ValidationError as e:
        problems = [
            {"field": ".".join(str(p) for p in err["loc"]), "problem": err["msg"]} for err in e.errors()
        ]
        raise ConfigError(
            f"Invalid configuration: {len(problems)} problem(s)", {"problems": problems}
        ) from None
