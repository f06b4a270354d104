"""Shared utility modules."""

from src.utils.config import apply_overrides, load_config
from src.utils.logging import get_logger, setup_logging, stage_context


__all__ = ["load_config", "apply_overrides", "setup_logging", "get_logger", "stage_context"]
