"""Pipeline orchestration: configuration, stages, run report and CLI."""

from src.pipeline.runner import STAGE_ORDER, STAGES, refresh_report, run_pipeline
from src.pipeline.settings import RunConfig, build_run_config

__all__ = ["STAGE_ORDER", "STAGES", "RunConfig", "build_run_config", "refresh_report", "run_pipeline"]
