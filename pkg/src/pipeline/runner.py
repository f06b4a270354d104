"""
Stage orchestration and the run report.

report.json accumulates across invocations that share an output directory: each
stage entry records its status, wall time, statistics and the sha256 of every file
it wrote. Re-running a stage marks entries downstream of it stale until they run
again.
"""

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from src.pipeline.io import read_json, sha256_file, write_json, write_yaml
from src.pipeline.settings import RunConfig
from src.pipeline.stages import (
    StageContext,
    StageOutput,
    run_build_panel,
    run_dlm_stage,
    run_doseresponse_stage,
    run_mixtures_stage,
    run_screen_stage,
    run_synth,
)
from src.pipeline.workers import worker_map
from src.utils.errors import ConfigError, StageDependencyError, WaterWasError
from src.utils.logging import get_logger, stage_context


logger = get_logger(__name__)


REPORT_FILE = "report.json"
CONFIG_ECHO_FILE = "config_echo.yaml"

OK = "ok"
FAILED = "failed"
SKIPPED = "skipped"
STALE = "stale"


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[StageContext], StageOutput]
    requires: Tuple[str, ...] = ()


STAGES: Dict[str, Stage] = {
    s.name: s
    for s in [
        Stage("synth", run_synth),
        Stage("build-panel", run_build_panel),
        Stage("screen", run_screen_stage, ("build-panel",)),
        Stage("dlm", run_dlm_stage, ("build-panel",)),
        Stage("mixtures", run_mixtures_stage, ("build-panel",)),
        Stage("doseresponse", run_doseresponse_stage, ("build-panel",)),
    ]
}
STAGE_ORDER = list(STAGES)
DEFAULT_STAGES = ["build-panel", "screen", "dlm", "mixtures", "doseresponse"]


def requirements(stage: str, config: RunConfig) -> Tuple[str, ...]:
    """Stages that must have produced their outputs before ``stage`` can run."""
    required = STAGES[stage].requires
    if stage == "doseresponse" and config.doseresponse.analytes is None:
        required = required + ("screen",)
    return required


def dependents(stage: str, config: RunConfig) -> List[str]:
    """Every stage downstream of ``stage``, directly or transitively."""
    found: List[str] = []
    frontier = [stage]
    while frontier:
        current = frontier.pop()
        for name in STAGE_ORDER:
            if current in requirements(name, config) and name not in found:
                found.append(name)
                frontier.append(name)
    return [n for n in STAGE_ORDER if n in found]


def order_stages(stages: Iterable[str]) -> List[str]:
    requested = list(stages)
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ConfigError(f"Unknown stage(s): {unknown}", {"known": STAGE_ORDER})
    return [s for s in STAGE_ORDER if s in requested]


def load_report(output_dir: Path) -> dict:
    path = Path(output_dir) / REPORT_FILE
    if not path.exists():
        return {"config": {}, "stages": {}}
    report = read_json(path)
    report.setdefault("stages", {})
    return report


def _outputs_intact(entry: dict, output_dir: Path) -> bool:
    for rel, digest in entry.get("outputs", {}).items():
        path = output_dir / rel
        if not path.exists() or sha256_file(path) != digest:
            return False
    return True


def _satisfied_before(stage: str, report: dict, output_dir: Path) -> bool:
    entry = report["stages"].get(stage)
    return bool(entry) and entry.get("status") == OK and _outputs_intact(entry, output_dir)


def check_dependencies(stages: List[str], config: RunConfig, report: dict) -> None:
    """
    Raise if a requested stage needs a stage that neither runs now nor has valid outputs.

    Raises:
        StageDependencyError: Naming the first stage and its missing requirement
    """
    planned = set(stages)
    for stage in stages:
        for required in requirements(stage, config):
            if required in planned:
                continue
            if not _satisfied_before(required, report, config.output_dir):
                raise StageDependencyError(stage, required)


def _relative(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return Path(path).resolve().as_posix()


def _mark_stale(report: dict, names: Iterable[str], reason: str) -> None:
    for name in names:
        entry = report["stages"].get(name)
        if entry and entry.get("status") == OK:
            entry["status"] = STALE
            entry["stale_reason"] = reason


def run_pipeline(config: RunConfig, stages: Optional[Iterable[str]] = None) -> dict:
    """
    Execute the requested stages in dependency order and write report.json.

    A failing stage stops every requested stage downstream of it; the report is written
    before the first failure is re-raised.

    Returns:
        The report dictionary as written
    """
    ordered = order_stages(stages if stages is not None else DEFAULT_STAGES)
    output_dir = config.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)

    report = load_report(output_dir)
    check_dependencies(ordered, config, report)
    report["config"] = config.echo()

    blocked: Dict[str, str] = {}
    first_error: Optional[BaseException] = None
    logger.info("pipeline_started", stages=ordered, threads=config.runtime.threads, output_dir=str(output_dir))

    with worker_map(config.runtime.threads) as map_fn:
        ctx = StageContext(config=config, map_fn=map_fn)
        for name in ordered:
            if name in blocked:
                report["stages"][name] = {"status": SKIPPED, "reason": f"upstream stage '{blocked[name]}' failed"}
                logger.warning("stage_skipped", stage=name, upstream=blocked[name])
                continue

            started = time.perf_counter()
            with stage_context(name):
                logger.info("stage_started")
                try:
                    output = STAGES[name].run(ctx)
                except Exception as e:
                    elapsed = time.perf_counter() - started
                    error = e.to_dict() if isinstance(e, WaterWasError) else {
                        "error": "internal", "message": str(e), "details": {"type": type(e).__name__}
                    }
                    previous = report["stages"].get(name, {})
                    report["stages"][name] = {
                        "status": FAILED,
                        "wall_seconds": round(elapsed, 3),
                        "error": error,
                        "stale_outputs": sorted(previous.get("outputs", {})),
                    }
                    downstream = dependents(name, config)
                    blocked.update({d: name for d in downstream if d not in blocked})
                    _mark_stale(report, downstream, f"upstream stage '{name}' failed")
                    logger.error("stage_failed", error=error["message"], category=error["error"])
                    first_error = first_error or e
                    continue

                elapsed = time.perf_counter() - started
                outputs = {_relative(p, output_dir): sha256_file(p) for p in output.paths}
                report["stages"][name] = {
                    "status": OK,
                    "wall_seconds": round(elapsed, 3),
                    "outputs": dict(sorted(outputs.items())),
                    "stats": output.stats,
                }
                _mark_stale(
                    report,
                    [d for d in dependents(name, config) if d not in ordered],
                    f"upstream stage '{name}' re-ran",
                )
                logger.info("stage_finished", seconds=round(elapsed, 3), outputs=len(outputs))

    write_json(report, output_dir / REPORT_FILE)
    write_yaml(config.echo(), output_dir / CONFIG_ECHO_FILE)
    logger.info("pipeline_finished", statuses={n: report["stages"][n]["status"] for n in ordered})

    if first_error is not None:
        raise first_error
    return report


def refresh_report(output_dir: Path | str) -> dict:
    """
    Re-hash every recorded output; stages whose files changed or vanished become stale.

    Raises:
        StageDependencyError: When the directory holds no report
    """
    output_dir = Path(output_dir)
    if not (output_dir / REPORT_FILE).exists():
        raise StageDependencyError("report", "any pipeline")

    report = load_report(output_dir)
    for name, entry in report["stages"].items():
        changed = [
            rel
            for rel, digest in entry.get("outputs", {}).items()
            if not (output_dir / rel).exists() or sha256_file(output_dir / rel) != digest
        ]
        if changed and entry.get("status") == OK:
            entry["status"] = STALE
            entry["stale_reason"] = "outputs changed on disk"
        entry["changed_outputs"] = changed

    write_json(report, output_dir / REPORT_FILE)
    logger.info(
        "report_refreshed",
        stages={n: e.get("status") for n, e in report["stages"].items()},
    )
    return report
