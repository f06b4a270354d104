"""
Unit tests for the synthetic panel generator.
"""

import numpy as np
import pandas as pd
import pytest

from src.data.loader import load_inputs
from src.data.panelprep import prepare_panel
from src.data.preprocessing import build_panel
from src.synth.generator import SynthSpec, generate_panel, write_inputs


class TestSynthSpec:
    """Tests for generator settings."""

    def test_names(self):
        spec = SynthSpec(n_zips=3, n_years=2, n_analytes=2, start_year=2015)
        assert spec.analytes == ["A01", "A02"]
        assert spec.zips == ["90000", "90001", "90002"]
        assert spec.years == [2015, 2016]

    def test_planted_beta_defaults_to_zero(self):
        assert SynthSpec(n_analytes=2).planted_beta() == {"A01": 0.0, "A02": 0.0}
        assert SynthSpec(n_analytes=2, beta=[0.1, -0.2]).planted_beta() == {"A01": 0.1, "A02": -0.2}

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_zips": 0},
            {"n_analytes": 2, "beta": [0.1]},
            {"missing_rate": 1.0},
            {"exposure_correlation": -0.1},
            {"n_analytes": 2, "lag_effects": {"A09": [0.1]}},
            {"n_analytes": 2, "quartile_effects": {"B01": 0.1}},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SynthSpec(**kwargs)


class TestGeneratePanel:
    """Tests for panel draws."""

    def test_shape(self, small_synth, small_spec):
        panel, truth = small_synth
        assert panel.n_rows == small_spec.n_zips * small_spec.n_years
        assert panel.analytes == small_spec.analytes
        assert len(truth.expected) == panel.n_rows
        panel.validate()

    def test_reproducible(self, small_spec, small_synth):
        again, _ = generate_panel(small_spec)
        pd.testing.assert_frame_equal(again.frame, small_synth[0].frame)

    def test_seed_changes_draws(self, small_spec, small_synth):
        other, _ = generate_panel(SynthSpec(**{**small_spec.to_dict(), "seed": small_spec.seed + 1}))
        assert not np.allclose(other.frame["deaths"], small_synth[0].frame["deaths"])

    def test_zip_draws_do_not_depend_on_panel_size(self):
        small, _ = generate_panel(SynthSpec(n_zips=5, n_years=4, n_analytes=3, seed=9))
        large, _ = generate_panel(SynthSpec(n_zips=10, n_years=4, n_analytes=3, seed=9))
        head = large.frame.iloc[: len(small.frame)].reset_index(drop=True)
        for column in ["population", "median_income", "groundwater", "A01", "A02", "A03"]:
            np.testing.assert_array_equal(head[column].to_numpy(), small.frame[column].to_numpy())

    def test_burn_in_covers_longest_lag(self):
        assert SynthSpec(n_analytes=2).burn_in == 2
        assert SynthSpec(n_analytes=2, lag_effects={"A01": [0.0, 0.0, 0.0, 0.1]}).burn_in == 4

    def test_lag_beyond_default_burn_in(self):
        common = dict(n_zips=6, n_years=6, n_analytes=2, missing_rate=0.0, seed=4)
        _, flat = generate_panel(SynthSpec(lag_effects={"A01": [0.0, 0.0, 0.0]}, **common))
        spec = SynthSpec(lag_effects={"A01": [0.0, 0.0, 0.05]}, **common)
        raw, truth = generate_panel(spec)
        prepared, _ = prepare_panel(raw)

        frame = prepared.frame
        exposure = frame.set_index(["zip", "year"])["A01"]
        earlier = exposure.reindex(pd.MultiIndex.from_arrays([frame["zip"], frame["year"] - 3])).to_numpy()
        later = (frame["year"] >= spec.start_year + 3).to_numpy()
        shift = np.log(truth.expected) - np.log(flat.expected)
        np.testing.assert_allclose(shift[later], 0.05 * earlier[later], atol=1e-10)

    def test_age_counts_sum_to_population(self, small_synth):
        frame = small_synth[0].frame
        counts = frame[["age_u5", "age_5_14", "age_15_24", "age_25_64", "age_65p"]].sum(axis=1)
        np.testing.assert_allclose(counts, frame["population"])
        np.testing.assert_allclose(frame["log_population"], np.log(frame["population"]))

    def test_deaths_match_expectation(self, small_synth):
        panel, truth = small_synth
        total, expected = panel.frame["deaths"].sum(), truth.expected.sum()
        assert abs(total - expected) < 4 * np.sqrt(expected)

    def test_missing_rate(self):
        panel, _ = generate_panel(SynthSpec(n_zips=100, n_years=5, n_analytes=4, missing_rate=0.2, seed=2))
        share = panel.frame[panel.analytes].isna().to_numpy().mean()
        assert share == pytest.approx(0.2, abs=0.05)

    def test_censoring(self):
        panel, _ = generate_panel(
            SynthSpec(n_zips=30, n_years=3, n_analytes=1, mean_population=200, censor_threshold=5, seed=4)
        )
        frame = panel.frame
        assert frame["censored"].sum() > 0
        assert (frame.loc[frame["censored"] == 1, "deaths"] == 0).all()

    def test_raw_exposures_positive(self, small_synth):
        values = small_synth[0].frame[small_synth[0].analytes].to_numpy()
        assert np.nanmin(values) > 0

    def test_correlated_block(self):
        panel, _ = generate_panel(
            SynthSpec(n_zips=200, n_years=4, n_analytes=4, exposure_block_size=2, exposure_correlation=0.8, seed=6)
        )
        r = panel.frame[panel.analytes].corr()
        assert r.loc["A01", "A02"] > 0.25
        assert abs(r.loc["A01", "A03"]) < 0.2


class TestWriteInputs:
    """Raw input files rebuild the generated panel."""

    def test_round_trip(self, tmp_path):
        spec = SynthSpec(n_zips=12, n_years=4, n_analytes=3, missing_rate=0.0, seed=8)
        panel, truth = generate_panel(spec)
        paths = write_inputs(panel, truth, tmp_path)
        assert {p.name for p in paths} == {
            "samples.csv", "lods.csv", "crosswalk.csv", "sources.csv", "demographics.csv", "deaths.csv",
        }

        rebuilt, report = build_panel(load_inputs(tmp_path))
        original = panel.frame.sort_values(["zip", "year"]).reset_index(drop=True)
        frame = rebuilt.frame
        assert rebuilt.analytes == panel.analytes
        assert report.n_imputed == 0
        for column in panel.analytes + ["deaths", "population", "median_income", "pct_65p"]:
            np.testing.assert_allclose(frame[column], original[column], rtol=1e-12)
        np.testing.assert_array_equal(frame["groundwater"], original["groundwater"])
        assert rebuilt.analyte_classes == panel.analyte_classes

    def test_missing_cells_stay_missing(self, tmp_path):
        spec = SynthSpec(n_zips=10, n_years=3, n_analytes=2, missing_rate=0.3, seed=12)
        panel, truth = generate_panel(spec)
        write_inputs(panel, truth, tmp_path)
        rebuilt, _ = build_panel(load_inputs(tmp_path))
        original = panel.frame.sort_values(["zip", "year"]).reset_index(drop=True)
        for column in panel.analytes:
            np.testing.assert_array_equal(rebuilt.frame[column].isna(), original[column].isna())
