"""Exception hierarchy shared by every pipeline module.

Each class carries a machine-readable ``category`` and the process exit code the
CLI uses when the error escapes a command.
"""

from typing import Any, Dict, Optional


class WaterWasError(Exception):
    """Base class for all pipeline errors."""

    category = "internal"
    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """Convert to the JSON payload printed by the CLI."""
        return {"error": self.category, "message": self.message, "details": self.details}


class ConfigError(WaterWasError):
    """Invalid or inconsistent configuration."""

    category = "config"
    exit_code = 2


class InputDataError(WaterWasError):
    """An input table is missing, malformed or violates an invariant."""

    category = "input"
    exit_code = 3


class MissingLodError(InputDataError):
    """A non-detect sample has no limit of detection to impute from."""

    def __init__(self, analyte: str):
        super().__init__(
            f"No LOD entry for analyte '{analyte}' which has zero-valued samples",
            {"analyte": analyte},
        )
        self.analyte = analyte


class UnknownSourceCodeError(InputDataError):
    """A water source code outside GW, GWP, GU, SW, SWP, NA."""


class StageDependencyError(WaterWasError):
    """A stage was requested before the stage producing its inputs."""

    category = "dependency"
    exit_code = 4

    def __init__(self, stage: str, missing: str):
        super().__init__(
            f"Stage '{stage}' requires stage '{missing}' to have run first",
            {"stage": stage, "missing_stage": missing},
        )


class EstimationError(WaterWasError):
    """Numerical failure while fitting a model."""

    category = "numerical"
    exit_code = 5


class ConvergenceError(EstimationError):
    """An iterative algorithm hit its iteration limit."""


class CollinearityError(EstimationError):
    """An exposure term is collinear with other terms."""


class ZeroVarianceError(EstimationError):
    """A column has no variation left (after demeaning or before standardizing)."""


class SingularMatrixError(EstimationError):
    """A cross-product or Hessian could not be inverted."""
