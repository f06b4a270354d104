"""Pytest fixtures for testing."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.data.panelprep import prepare_panel
from src.synth.generator import SynthSpec, generate_panel


FIXTURES_DIR = Path(__file__).parent / "fixtures"


def write_csv(directory: Path, name: str, rows: dict) -> Path:
    """Write a dict of columns as a CSV file and return its path."""
    path = directory / name
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


@pytest.fixture
def raw_input_dir(tmp_path):
    """
    Two zips, two years, three water systems.

    P1 (groundwater) serves 90001 alone; P2 (surface) is split between both zips;
    P3 (surface) serves half of 90002. P3's 2012 lead sample is a non-detect.
    """
    directory = tmp_path / "inputs"
    directory.mkdir()
    write_csv(
        directory,
        "samples.csv",
        {
            "pws_id": ["P1", "P2", "P3", "P1", "P2", "P3", "P2"],
            "analyte": ["Lead", "Lead", "Lead", "Lead", "Lead", "Lead", "Nitrate"],
            "year": [2012, 2012, 2012, 2013, 2013, 2013, 2012],
            "value": [1.0, 3.0, 0.0, 2.0, 4.0, 5.0, 10.0],
        },
    )
    write_csv(
        directory,
        "lods.csv",
        {"analyte": ["Lead", "Nitrate"], "lod": [2.0, 0.4], "analyte_class": ["Metal", "Nutrient"]},
    )
    write_csv(
        directory,
        "crosswalk.csv",
        {
            "pws_id": ["P1", "P2", "P2", "P3"],
            "zip": ["90001", "90001", "90002", "90002"],
            "weight": [1.0, 0.5, 0.5, 0.5],
        },
    )
    write_csv(directory, "sources.csv", {"pws_id": ["P1", "P2", "P3"], "source_code": ["GW", "SW", "SWP"]})
    write_csv(
        directory,
        "demographics.csv",
        {
            "zip": ["90001", "90001", "90002", "90002"],
            "year": [2012, 2013, 2012, 2013],
            "population": [1000, 1000, 2000, 2000],
            "median_income": [50000, 51000, 70000, 71000],
            "age_u5": [50, 50, 100, 100],
            "age_5_14": [100, 100, 200, 200],
            "age_15_24": [150, 150, 300, 300],
            "age_25_64": [500, 500, 1000, 1000],
            "age_65p": [200, 200, 400, 400],
        },
    )
    write_csv(
        directory,
        "deaths.csv",
        {
            "zip": ["90001", "90001", "90002", "90002"],
            "year": [2012, 2013, 2012, 2013],
            "deaths": [10, 12, 0, 20],
            "censored": [0, 0, 1, 0],
        },
    )
    return directory


@pytest.fixture(scope="session")
def small_spec():
    """Small synthetic design with one planted effect and no missing exposures."""
    return SynthSpec(
        n_zips=40,
        n_years=6,
        n_analytes=4,
        beta=[0.1, 0.0, 0.0, 0.0],
        missing_rate=0.0,
        base_log_rate=-4.0,
        seed=11,
    )


@pytest.fixture(scope="session")
def small_synth(small_spec):
    """(raw panel, truth) drawn from ``small_spec``."""
    return generate_panel(small_spec)


@pytest.fixture
def prepared_panel(small_synth):
    """Standardized copy of the small synthetic panel."""
    raw, _ = small_synth
    prepared, _ = prepare_panel(raw)
    return prepared


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def temp_output_dir(tmp_path):
    """Empty directory for pipeline outputs."""
    out = tmp_path / "outputs"
    out.mkdir()
    return out
