"""
Command-line entry point.

Usage:
    waterwas synth --output-dir runs/demo --seed 7
    waterwas run --stages build-panel screen --output-dir runs/demo
    waterwas report --output-dir runs/demo

Results go to the output directory and a one-line JSON summary to stdout. Failures
print ``{"error": <category>, "message": ..., "details": ...}`` on stderr and exit
with the category's code.
"""

import argparse
import json
import sys
from typing import List, Optional

from src.pipeline.runner import DEFAULT_STAGES, STAGE_ORDER, refresh_report, run_pipeline
from src.pipeline.settings import RunConfig, build_run_config
from src.utils.config import DEFAULT_CONFIG_PATH, apply_overrides, load_config
from src.utils.errors import WaterWasError
from src.utils.logging import get_logger, setup_logging


logger = get_logger(__name__)


def _common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument(
        "--config",
        default=str(DEFAULT_CONFIG_PATH),
        help=f"YAML configuration file (default: {DEFAULT_CONFIG_PATH})",
    )
    parent.add_argument("--output-dir", help="Directory for all outputs (runtime.output_dir)")
    parent.add_argument("--threads", type=int, help="Worker threads (runtime.threads)")
    parent.add_argument("--seed", type=int, help="Synthetic generator seed (synth.seed)")
    parent.add_argument("--drop-censored", action="store_true", help="Drop censored zip-years from the panel")
    parent.add_argument(
        "--small-sample-correction", action="store_true", help="Scale clustered covariances by G/(G-1)"
    )
    parent.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override any configuration key; may be repeated",
    )
    parent.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    parent.add_argument("--log-format", choices=["text", "json"], help="Log output format")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="waterwas",
        description="Water-wide association study of drinking-water analytes and mortality",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    helps = {
        "synth": "Generate synthetic raw inputs with planted effects",
        "build-panel": "Ingest raw tables and build the standardized zip-year panel",
        "screen": "Screen every analyte, adjust p-values and run robustness checks",
        "dlm": "Fit distributed lag models with a lead negative control",
        "mixtures": "Correlations, network, MDS and mixture effects",
        "doseresponse": "Penalized-spline exposure-response curves",
    }
    for name in STAGE_ORDER:
        sub.add_parser(name, parents=[common], help=helps[name])

    run = sub.add_parser("run", parents=[common], help="Run several stages in dependency order")
    run.add_argument(
        "--stages",
        nargs="+",
        default=list(DEFAULT_STAGES),
        choices=STAGE_ORDER,
        help=f"Stages to run (default: {' '.join(DEFAULT_STAGES)})",
    )
    sub.add_parser("report", parents=[common], help="Re-hash recorded outputs and flag stale stages")
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Dedicated flags expressed as ``section.key=value`` overrides."""
    overrides = []
    if args.output_dir is not None:
        overrides.append(f"runtime.output_dir={json.dumps(args.output_dir)}")
    if args.threads is not None:
        overrides.append(f"runtime.threads={args.threads}")
    if args.seed is not None:
        overrides.append(f"synth.seed={args.seed}")
    if args.drop_censored:
        overrides.append("panel.drop_censored=true")
    if args.small_sample_correction:
        overrides.append("fit.small_sample_correction=true")
    if args.log_level is not None:
        overrides.append(f"logging.level={args.log_level}")
    if args.log_format is not None:
        overrides.append(f"logging.format={args.log_format}")
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then ``--set`` overrides, then dedicated flags; later wins."""
    raw = load_config(args.config)
    raw = apply_overrides(raw, list(args.set) + flag_overrides(args))
    return build_run_config(raw)


def _emit_error(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = resolve_config(args)
        setup_logging(config.logging.level, config.logging.format)

        if args.command == "report":
            report = refresh_report(config.output_dir)
        else:
            stages = args.stages if args.command == "run" else [args.command]
            report = run_pipeline(config, stages)
    except WaterWasError as e:
        _emit_error(e.to_dict())
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected_error")
        _emit_error({"error": "internal", "message": str(e), "details": {"type": type(e).__name__}})
        return 1

    summary = {
        "output_dir": str(config.output_dir),
        "stages": {name: entry.get("status") for name, entry in report["stages"].items()},
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
