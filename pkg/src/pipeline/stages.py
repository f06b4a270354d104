"""
Pipeline stages.

Each stage reads its inputs from the run's output directory, writes its tables there
and returns the paths it wrote plus a dictionary of run statistics.
"""

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.data.loader import load_inputs
from src.data.panel import ZipYearPanel
from src.data.panelprep import prepare_panel
from src.data.preprocessing import build_panel
from src.doseresponse.pspline import fit_exposure_response
from src.laglead.dlm import build_lag_design, fit_dlm
from src.mixtures.cooccurrence import correlation_matrix, correlation_network, mds_from_correlation
from src.mixtures.qgcomp import load_mixture_specs, run_mixtures
from src.pipeline.io import write_json, write_table
from src.pipeline.settings import RunConfig
from src.regression.feglm import fit_poisson_fe
from src.screening.attribution import attributable_mortality
from src.screening.robustness import apply_ladder
from src.screening.screen import RETAINED, primary_spec, run_screen, screen_table
from src.synth.generator import generate_panel, write_inputs
from src.utils.errors import InputDataError, WaterWasError
from src.utils.logging import get_logger


logger = get_logger(__name__)


PANEL_DIR = "panel"
SCREEN_FILE = "screen_results.csv"
DOSERESPONSE_DIR = "doseresponse"


def file_stem(analyte: str) -> str:
    """Analyte name made safe for use in a file name."""
    return re.sub(r"[^A-Za-z0-9._-]+", "_", analyte).strip("_") or "analyte"


@dataclass
class StageOutput:
    """What one stage produced."""

    paths: List[Path] = field(default_factory=list)
    stats: Dict[str, object] = field(default_factory=dict)


@dataclass
class StageContext:
    config: RunConfig
    map_fn: Callable = map
    _panel: Optional[ZipYearPanel] = field(default=None, repr=False)

    @property
    def output_dir(self) -> Path:
        return self.config.output_dir

    def panel(self) -> ZipYearPanel:
        if self._panel is None:
            self._panel = ZipYearPanel.load(self.output_dir / PANEL_DIR)
        return self._panel


def run_synth(ctx: StageContext) -> StageOutput:
    """Generate a synthetic panel and write it as raw input CSVs."""
    spec = ctx.config.synth.to_spec()
    panel, truth = generate_panel(spec)
    directory = ctx.config.input_dir
    paths = write_inputs(panel, truth, directory)

    truth_table = pd.DataFrame(
        {
            "analyte": list(truth.beta),
            "beta": list(truth.beta.values()),
            "scale": [truth.scales[a] for a in truth.beta],
        }
    )
    paths.append(write_table(truth_table, ctx.output_dir / "synth_truth.csv"))
    return StageOutput(
        paths=paths,
        stats={"zips": spec.n_zips, "years": spec.n_years, "analytes": spec.n_analytes, "seed": spec.seed},
    )


def run_build_panel(ctx: StageContext) -> StageOutput:
    """Ingest raw tables, build the zip-year panel, filter and standardize analytes."""
    section = ctx.config.panel
    inputs = load_inputs(
        ctx.config.input_dir,
        files=ctx.config.inputs.files,
        start_year=section.start_year,
        end_year=section.end_year,
    )
    raw, report = build_panel(inputs, drop_censored=section.drop_censored)
    prepared, summary = prepare_panel(raw, section.missing_threshold, section.freq_cut, section.unique_cut)
    if not prepared.analytes:
        raise InputDataError("No analyte survived the missingness and near-zero-variance filters")

    paths = prepared.save(ctx.output_dir / PANEL_DIR)
    ctx._panel = None
    paths.append(write_table(summary, ctx.output_dir / "panel_summary.csv"))
    if inputs.mcl is not None:
        paths.append(write_table(inputs.mcl.reset_index(), ctx.output_dir / PANEL_DIR / "mcl.csv"))

    stats = report.to_dict()
    stats["analytes_kept"] = len(prepared.analytes)
    return StageOutput(paths=paths, stats=stats)


def _attribution_targets(rows, mode: str, alpha: float) -> list:
    if mode == "all":
        return [r for r in rows if r.fit is not None]
    if mode == "retained":
        return [r for r in rows if r.status == RETAINED and r.fit is not None]
    return [r for r in rows if r.significant(alpha) and r.fit is not None]


def run_screen_stage(ctx: StageContext) -> StageOutput:
    """Per-analyte screen, BH adjustment, robustness ladder and attribution."""
    panel = ctx.panel()
    settings = ctx.config.screening_settings()
    rows = run_screen(panel, settings, map_fn=ctx.map_fn)
    if ctx.config.screening.run_ladder:
        rows = apply_ladder(rows, panel, settings, map_fn=ctx.map_fn)

    paths = [write_table(screen_table(rows), ctx.output_dir / SCREEN_FILE)]

    targets = _attribution_targets(rows, ctx.config.screening.attribution, settings.alpha)
    results = [attributable_mortality(r.fit, panel, r.analyte, ctx.config.screening.attribution_clip) for r in targets]
    per_row = (
        pd.concat([a.per_row for a in results], ignore_index=True)
        if results
        else pd.DataFrame(columns=["analyte", "zip", "year", "attributable_deaths"])
    )
    summary = pd.DataFrame(
        [a.summary() for a in results],
        columns=[
            "analyte", "attributable_deaths", "ci_lo", "ci_hi", "n_years",
            "deaths_per_year", "per_year_ci_lo", "per_year_ci_hi",
        ],
    )
    paths.append(write_table(per_row, ctx.output_dir / "attribution.csv"))
    paths.append(write_table(summary, ctx.output_dir / "attribution_summary.csv"))

    fits = [r.fit for r in rows if r.fit is not None]
    return StageOutput(
        paths=paths,
        stats={
            "analytes": len(rows),
            "failed": sum(1 for r in rows if r.error),
            "significant": sum(r.significant(settings.alpha) for r in rows),
            "retained": sum(r.status == RETAINED for r in rows),
            "not_converged": sum(not f.converged for f in fits),
            "max_iterations": max((f.iterations for f in fits), default=0),
            "dropped_groups": int(sum(r.dropped_groups for r in rows)),
        },
    )


def _dlm_row(panel: ZipYearPanel, analyte: str, ctx: StageContext) -> Tuple[dict, bool]:
    settings = ctx.config.screening_settings()
    try:
        primary = fit_poisson_fe(primary_spec(analyte, settings), panel, settings.options)
        design = build_lag_design(panel, analyte, settings.lags, settings.lead)
        dlm = fit_dlm(design, settings.covariates, settings.options, settings.cluster)
    except (WaterWasError, ValueError, KeyError, np.linalg.LinAlgError) as e:
        logger.warning("dlm_failed", analyte=analyte, error=str(e))
        return {"analyte": analyte, "error": str(e)}, False
    row = dlm.to_row(np.sign(primary.coef_of(analyte)))
    row["primary_coef"] = primary.coef_of(analyte)
    row["error"] = ""
    return row, True


def run_dlm_stage(ctx: StageContext) -> StageOutput:
    """Joint lag/lead fit for each analyte, next to its primary fit."""
    panel = ctx.panel()
    analytes = sorted(ctx.config.laglead.analytes or panel.analytes)
    missing = [a for a in analytes if a not in panel.analytes]
    if missing:
        raise InputDataError(f"laglead.analytes not in the panel: {missing}", {"analytes": missing})

    outcomes = ctx.map_fn(lambda a: _dlm_row(panel, a, ctx), analytes)
    rows = [row for row, _ in outcomes]
    table = pd.DataFrame(rows)
    ordered = ["analyte", "n_obs"] + [c for c in table.columns if c not in ("analyte", "n_obs", "error")] + ["error"]
    table = table.reindex(columns=[c for c in ordered if c in table.columns])

    path = write_table(table, ctx.output_dir / "dlm_results.csv")
    ok = table["error"].fillna("") == ""
    return StageOutput(
        paths=[path],
        stats={
            "analytes": len(analytes),
            "failed": int((~ok).sum()),
            "pass_m5": int(table.get("pass_m5", pd.Series(dtype=float)).fillna(0).sum()),
            "pass_m6": int(table.get("pass_m6", pd.Series(dtype=float)).fillna(0).sum()),
        },
    )


def run_mixtures_stage(ctx: StageContext) -> StageOutput:
    """Correlations, network edges, MDS coordinates and quantile g-computation."""
    panel = ctx.panel()
    section = ctx.config.mixtures
    out = ctx.output_dir
    paths = []

    matrix = correlation_matrix(panel, sorted(panel.analytes), section.min_pair_rows)
    paths.append(write_table(matrix.to_long(), out / "correlations.csv"))
    edges = correlation_network(matrix, section.network_threshold)
    paths.append(write_table(edges, out / "network_edges.csv"))

    mds = mds_from_correlation(matrix, panel.analyte_classes, section.mds_dims)
    paths.append(write_table(mds.to_frame(), out / "mds_coords.csv"))
    paths.append(
        write_json(
            {
                "n_dims": mds.n_dims,
                "n_imputed_pairs": mds.n_imputed,
                "eigenvalues": mds.eigenvalues.tolist(),
            },
            out / "mds.json",
        )
    )

    specs = load_mixture_specs(section.definitions)
    table, results = run_mixtures(specs, panel, ctx.config.qgcomp_settings(), map_fn=ctx.map_fn)
    paths.append(write_table(table, out / "mixture_results.csv"))
    curves = (
        pd.concat([r.curve() for r in results], ignore_index=True)
        if results
        else pd.DataFrame(columns=["mixture", "quantile", "rate_ratio", "ci_lo", "ci_hi"])
    )
    paths.append(write_table(curves, out / "mixture_curves.csv"))

    return StageOutput(
        paths=paths,
        stats={
            "analytes": len(matrix.analytes),
            "edges": len(edges),
            "mds_dims": mds.n_dims,
            "mixtures": len(specs),
            "mixtures_fitted": len(results),
        },
    )


def doseresponse_analytes(ctx: StageContext) -> List[str]:
    """Configured analytes, or those the screen retained."""
    configured = ctx.config.doseresponse.analytes
    if configured is not None:
        return sorted(configured)
    table = pd.read_csv(ctx.output_dir / SCREEN_FILE, keep_default_na=False, dtype={"analyte": str})
    return sorted(table.loc[table["status"] == RETAINED, "analyte"])


def _mcl_lookup(ctx: StageContext) -> Dict[str, float]:
    path = ctx.output_dir / PANEL_DIR / "mcl.csv"
    if not path.exists():
        return {}
    table = pd.read_csv(path, dtype={"analyte": str})
    return dict(zip(table["analyte"], table["mcl"].astype(float)))


def run_doseresponse_stage(ctx: StageContext) -> StageOutput:
    """Penalized-spline exposure-response curve, derivative and density per analyte."""
    panel = ctx.panel()
    settings = ctx.config.doseresponse_settings()
    analytes = doseresponse_analytes(ctx)
    missing = [a for a in analytes if a not in panel.analytes]
    if missing:
        raise InputDataError(f"doseresponse.analytes not in the panel: {missing}", {"analytes": missing})

    mcl = _mcl_lookup(ctx)
    directory = ctx.output_dir / DOSERESPONSE_DIR
    paths, summaries = [], []
    for analyte in analytes:
        try:
            # Parallel over the lambda grid; analytes run one after another
            result = fit_exposure_response(panel, analyte, settings, mcl.get(analyte), map_fn=ctx.map_fn)
        except (WaterWasError, ValueError, np.linalg.LinAlgError) as e:
            logger.warning("dose_response_failed", analyte=analyte, error=str(e))
            summaries.append({"analyte": analyte, "error": str(e)})
            continue
        paths.append(write_table(result.curve, directory / f"doseresponse_{file_stem(analyte)}.csv"))
        paths.append(write_table(result.density, directory / f"density_{file_stem(analyte)}.csv"))
        if result.selection is not None:
            paths.append(write_table(result.selection.table, directory / f"lambda_{file_stem(analyte)}.csv"))
        summaries.append({**result.summary(), "error": ""})

    summary = pd.DataFrame(summaries) if summaries else pd.DataFrame(columns=["analyte", "error"])
    paths.append(write_table(summary, ctx.output_dir / "doseresponse_summary.csv"))
    return StageOutput(
        paths=paths,
        stats={"analytes": len(analytes), "failed": sum(1 for s in summaries if s["error"])},
    )
