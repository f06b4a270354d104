"""
Unit tests for configuration loading, validation and the command line.
"""

import json
from pathlib import Path

import pytest
import yaml

from src.pipeline.cli import build_parser, flag_overrides, main, resolve_config
from src.pipeline.settings import THREADS_ENV, RunConfig, build_run_config
from src.utils.config import apply_overrides, load_config
from src.utils.errors import ConfigError


CONFIG_PATH = Path(__file__).parents[2] / "config" / "config.yaml"


def _write_yaml(path: Path, payload: dict) -> Path:
    path.write_text(yaml.safe_dump(payload))
    return path


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)


class TestLoadConfig:
    """Tests for YAML loading and overrides."""

    def test_shipped_config_matches_defaults(self):
        config = build_run_config(load_config(CONFIG_PATH))
        defaults = RunConfig()
        for section in ("panel", "fit", "screening", "laglead", "doseresponse", "synth", "logging"):
            assert getattr(config, section) == getattr(defaults, section)

    def test_missing_explicit_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_missing_default_file_is_empty(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert load_config() == {}

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("panel: [unclosed")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_env_substitution(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WW_TEST_OUT", "/data/run")
        path = _write_yaml(tmp_path / "c.yaml", {"runtime": {"output_dir": "${WW_TEST_OUT}"}})
        assert load_config(path)["runtime"]["output_dir"] == "/data/run"

    def test_overrides_parse_values(self):
        base = {"panel": {"start_year": 2012}}
        result = apply_overrides(base, ["panel.start_year=2014", "laglead.lags=[1, 2]", "screening.run_ladder=false"])
        assert result["panel"]["start_year"] == 2014
        assert result["laglead"]["lags"] == [1, 2]
        assert result["screening"]["run_ladder"] is False
        assert base["panel"]["start_year"] == 2012

    def test_override_without_equals(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["panel.start_year"])


class TestRunConfig:
    """Tests for configuration validation."""

    def test_defaults(self):
        config = build_run_config({})
        assert config.screening.alpha == 0.05
        assert config.laglead.lags == [0, 1, 2]
        assert config.runtime.threads == 1
        assert config.input_dir == Path("outputs") / "inputs"

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            build_run_config({"screening": {"alfa": 0.1}})
        fields = [p["field"] for p in exc.value.details["problems"]]
        assert "screening.alfa" in fields
        assert exc.value.exit_code == 2

    def test_every_problem_listed(self):
        with pytest.raises(ConfigError) as exc:
            build_run_config({"screening": {"alpha": 2.0}, "mixtures": {"quantiles": 1}})
        assert len(exc.value.details["problems"]) == 2

    def test_year_window(self):
        with pytest.raises(ConfigError):
            build_run_config({"panel": {"start_year": 2020, "end_year": 2015}})

    def test_lags_sorted_and_validated(self):
        assert build_run_config({"laglead": {"lags": [2, 0, 1]}}).laglead.lags == [0, 1, 2]
        with pytest.raises(ConfigError):
            build_run_config({"laglead": {"lags": [0, -1]}})

    def test_unknown_input_table(self):
        with pytest.raises(ConfigError):
            build_run_config({"inputs": {"files": {"weather": "w.csv"}}})

    def test_threads_from_environment(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert build_run_config({}).runtime.threads == 3

    def test_bad_threads_environment(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(ConfigError):
            build_run_config({})

    def test_synth_spec(self):
        config = build_run_config({"synth": {"n_analytes": 2, "beta": [0.1, 0.0], "seed": 4}})
        spec = config.synth.to_spec()
        assert spec.planted_beta() == {"A01": 0.1, "A02": 0.0}
        assert spec.seed == 4

    def test_synth_spec_inconsistent(self):
        config = build_run_config({"synth": {"n_analytes": 3, "beta": [0.1]}})
        with pytest.raises(ConfigError):
            config.synth.to_spec()

    def test_module_settings(self):
        config = build_run_config(
            {"laglead": {"lags": [0, 1], "lead": 2}, "fit": {"small_sample_correction": True}}
        )
        settings = config.screening_settings()
        assert settings.lags == [0, 1]
        assert settings.lead == 2
        assert settings.options.small_sample_correction
        assert config.qgcomp_settings().q == 4
        assert config.doseresponse_settings().covariates == config.screening.covariates

    def test_echo_round_trip(self, tmp_path):
        config = build_run_config({"runtime": {"output_dir": str(tmp_path)}, "doseresponse": {"lam": 5.0}})
        echoed = config.echo()
        json.dumps(echoed)
        assert build_run_config(echoed) == config


class TestCommandLine:
    """Tests for argument parsing and exit codes."""

    def test_flags_become_overrides(self):
        args = build_parser().parse_args(["screen", "--threads", "2", "--seed", "9", "--drop-censored"])
        assert flag_overrides(args) == ["runtime.threads=2", "synth.seed=9", "panel.drop_censored=true"]

    def test_precedence(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", {"runtime": {"threads": 8}, "screening": {"alpha": 0.01}})
        args = build_parser().parse_args(
            [
                "run", "--config", str(path),
                "--set", "runtime.threads=5", "--set", "screening.alpha=0.1",
                "--threads", "2", "--output-dir", str(tmp_path / "out"),
            ]
        )
        config = resolve_config(args)
        assert config.runtime.threads == 2
        assert config.screening.alpha == 0.1
        assert config.output_dir == tmp_path / "out"
        assert args.stages == ["build-panel", "screen", "dlm", "mixtures", "doseresponse"]

    def test_unknown_stage_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--stages", "plots"])

    def test_config_error_exit_code(self, tmp_path, capsys):
        config = _write_yaml(tmp_path / "c.yaml", {})
        code = main(["screen", "--config", str(config), "--set", "screening.alpha=7"])
        assert code == 2
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload["error"] == "config"

    def test_missing_upstream_exit_code(self, tmp_path, capsys):
        config = _write_yaml(tmp_path / "c.yaml", {})
        code = main(["screen", "--config", str(config), "--output-dir", str(tmp_path / "out")])
        assert code == 4
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload["error"] == "dependency"
        assert payload["details"] == {"stage": "screen", "missing_stage": "build-panel"}

    def test_report_without_runs(self, tmp_path, capsys):
        config = _write_yaml(tmp_path / "c.yaml", {})
        assert main(["report", "--config", str(config), "--output-dir", str(tmp_path / "out")]) == 4
