"""Association screen, robustness ladder and attributable mortality."""

from src.screening.attribution import AttributionResult, attributable_fraction, attributable_mortality
from src.screening.robustness import (
    LADDER_RUNGS,
    LadderResult,
    LadderRung,
    apply_ladder,
    fit_rung,
    robustness_ladder,
)
from src.screening.screen import (
    EXCLUDED_AFTER_CHECKS,
    NOT_SIGNIFICANT,
    RETAINED,
    SCREEN_COLUMNS,
    ScreeningSettings,
    ScreenRow,
    assign_status,
    bh_adjust,
    primary_spec,
    run_screen,
    screen_analyte,
    screen_table,
)

__all__ = [
    "AttributionResult",
    "attributable_fraction",
    "attributable_mortality",
    "LADDER_RUNGS",
    "LadderResult",
    "LadderRung",
    "apply_ladder",
    "fit_rung",
    "robustness_ladder",
    "EXCLUDED_AFTER_CHECKS",
    "NOT_SIGNIFICANT",
    "RETAINED",
    "SCREEN_COLUMNS",
    "ScreeningSettings",
    "ScreenRow",
    "assign_status",
    "bh_adjust",
    "primary_spec",
    "run_screen",
    "screen_analyte",
    "screen_table",
]
