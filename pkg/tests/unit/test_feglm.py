"""
Unit tests for the fixed-effects Poisson estimator.
"""

import numpy as np
import pandas as pd
import pytest

from src.data.panelprep import prepare_panel
from src.regression.feglm import (
    FitOptions,
    RegressionSpec,
    cluster_vcov,
    demean,
    drop_all_zero_levels,
    factorize,
    fit_poisson_arrays,
    fit_poisson_fe,
    rate_increase,
    sandwich,
)
from src.synth.generator import SynthSpec, generate_panel
from src.synth.oracle import dense_design, oracle_fit, oracle_fit_dense
from src.utils.errors import (
    CollinearityError,
    ConvergenceError,
    EstimationError,
    SingularMatrixError,
    ZeroVarianceError,
)
from tests.conftest import FIXTURES_DIR


TIGHT = FitOptions(tol=1e-12, demean_tol=1e-12)
COVARIATES = ["income_10k", "pct_65p"]


def _frame(n_zips: int = 12, n_years: int = 5, seed: int = 1) -> pd.DataFrame:
    spec = SynthSpec(
        n_zips=n_zips,
        n_years=n_years,
        n_analytes=2,
        beta=[0.08, -0.03],
        missing_rate=0.05,
        base_log_rate=-4.5,
        seed=seed,
    )
    raw, _ = generate_panel(spec)
    prepared, _ = prepare_panel(raw)
    frame = prepared.frame.copy()
    frame["income_10k"] = frame["median_income"] / 1e4
    return frame


@pytest.fixture(scope="module")
def frame():
    return _frame()


def _spec(**kwargs) -> RegressionSpec:
    kwargs.setdefault("exposures", ["A01"])
    kwargs.setdefault("covariates", COVARIATES)
    return RegressionSpec(**kwargs)


class TestDemean:
    """Tests for alternating-projection demeaning."""

    def test_two_balanced_factors(self):
        out = demean(np.array([1.0, 2.0, 3.0, 4.0]), [np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])])
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_single_factor(self):
        np.testing.assert_allclose(demean(np.array([1.0, 2.0, 3.0]), [np.zeros(3, dtype=int)]), [-1, 0, 1])

    def test_cell_constant_column_absorbed(self):
        a = np.array([0, 0, 1, 1, 2, 2])
        b = np.array([0, 1, 0, 1, 0, 1])
        column = np.array([5.0, 5.0, -2.0, -2.0, 7.0, 7.0]) + np.array([1.0, 3.0] * 3)
        np.testing.assert_allclose(demean(column, [a, b]), 0.0, atol=1e-9)

    def test_weighted_group_means_vanish(self, rng):
        n = 300
        a = rng.integers(0, 25, n)
        b = rng.integers(0, 7, n)
        w = rng.uniform(0.2, 3.0, n)
        out = demean(rng.normal(size=(n, 3)), [a, b], w)
        for codes in (a, b):
            sums = np.array([np.bincount(codes, weights=w * out[:, j]) for j in range(3)])
            totals = np.bincount(codes, weights=w)
            np.testing.assert_allclose(sums / np.where(totals > 0, totals, 1.0), 0.0, atol=1e-8)

    def test_non_convergence_reports_delta(self, rng):
        n = 200
        a = rng.integers(0, 30, n)
        b = rng.integers(0, 10, n)
        with pytest.raises(ConvergenceError) as exc:
            demean(rng.normal(size=n), [a, b], max_iter=1)
        assert exc.value.details["last_delta"] > 0


class TestDropAllZeroLevels:
    """Tests for removing fixed-effect levels with no events."""

    def test_iterative_removal(self):
        y = np.array([0.0, 0.0, 3.0, 1.0, 0.0])
        zips = np.array([0, 0, 1, 1, 2])
        years = np.array([0, 1, 0, 1, 1])
        keep, dropped = drop_all_zero_levels(y, [zips, years])
        assert keep.tolist() == [False, False, True, True, False]
        assert dropped == 2


class TestClosedForms:
    """Fits with known maximum-likelihood solutions."""

    def test_intercept_only(self):
        fit = fit_poisson_arrays(np.array([1.0, 2.0, 3.0]), np.ones((3, 1)), ["intercept"], options=TIGHT)
        assert fit.coef[0] == pytest.approx(np.log(2.0), abs=1e-10)

    def test_intercept_with_offset(self):
        fit = fit_poisson_arrays(
            np.array([2.0, 4.0]), np.ones((2, 1)), ["intercept"], offset=np.log([1.0, 2.0]), options=TIGHT
        )
        assert fit.coef[0] == pytest.approx(np.log(2.0), abs=1e-10)

    def test_oracle_intercept_only(self):
        fit = oracle_fit_dense(np.array([1.0, 2.0, 3.0]), np.ones((3, 1)), ["intercept"])
        assert fit.coef[0] == pytest.approx(np.log(2.0), abs=1e-10)

    def test_oracle_rank_deficient(self):
        X = np.column_stack([np.ones(4), np.ones(4)])
        with pytest.raises(SingularMatrixError):
            oracle_fit_dense(np.array([1.0, 2.0, 3.0, 4.0]), X, ["a", "b"])


class TestRateIncrease:
    """Tests for the percent-change transform."""

    @pytest.mark.parametrize(("beta", "expected"), [(0.0046, 0.46), (-0.0066, -0.66), (0.0072, 0.72), (0.0, 0.0)])
    def test_point(self, beta, expected):
        assert round(rate_increase(beta, 0.001).increase_pct, 2) == expected

    def test_interval(self):
        change = rate_increase(0.01, 0.002)
        assert change.ci_lo == pytest.approx((np.exp(0.01 - 1.959964 * 0.002) - 1) * 100)
        assert change.ci_hi == pytest.approx((np.exp(0.01 + 1.959964 * 0.002) - 1) * 100)

    def test_negative_se(self):
        with pytest.raises(ValueError):
            rate_increase(0.1, -1.0)


class TestOracleEquivalence:
    """The absorbed fit matches the dense dummy-variable GLM."""

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_coefficients_and_clustered_se(self, seed):
        data = _frame(n_zips=10, n_years=5, seed=seed)
        terms = ["A01", "A02"] + COVARIATES
        fit = fit_poisson_fe(_spec(exposures=["A01", "A02"]), data, TIGHT)
        oracle = oracle_fit(data, terms)

        assert fit.names == terms
        np.testing.assert_allclose(fit.coef, oracle.coef, rtol=1e-7, atol=1e-10)
        np.testing.assert_allclose(fit.se, oracle.se, rtol=1e-6)
        assert fit.n_obs == oracle.n_obs

    def test_heteroskedasticity_robust_when_unclustered(self, frame):
        fit = fit_poisson_fe(_spec(cluster=None), frame, TIGHT)
        data = frame[fit.used].reset_index(drop=True)
        X = dense_design(data[["A01"] + COVARIATES].to_numpy(), factorize(data["zip"]), factorize(data["year"]))
        oracle = oracle_fit_dense(
            data["deaths"].to_numpy(dtype=float), X, ["A01"] + COVARIATES, offset=data["log_population"].to_numpy()
        )
        np.testing.assert_allclose(fit.vcov, oracle.vcov, rtol=1e-6)
        np.testing.assert_allclose(cluster_vcov(fit), fit.vcov, rtol=1e-10)

    def test_clustered_errors_exceed_model_errors(self, rng):
        n_zips, n_years = 80, 10
        zips = np.repeat(np.arange(n_zips), n_years)
        years = np.tile(np.arange(n_years), n_zips)
        t = years - years.mean()
        # zip-specific trends in both exposure and rate make residuals correlated within zip
        exposure = rng.normal(0.0, 1.0, n_zips)[zips] * t / 4.0 + rng.normal(0.0, 0.3, zips.size)
        drift = rng.normal(0.0, 0.05, n_zips)[zips] * t
        eta = 7.0 + rng.normal(0.0, 0.3, n_zips)[zips] + 0.02 * exposure + drift
        data = pd.DataFrame(
            {"zip": zips, "year": years, "x": exposure, "deaths": rng.poisson(np.exp(eta)), "log_population": 0.0}
        )
        fit = fit_poisson_fe(RegressionSpec(exposures=["x"]), data, TIGHT)
        model_se = np.sqrt(fit.vcov_model[0, 0])
        assert fit.se_of("x") > 2.0 * model_se

    def test_small_sample_correction(self, frame):
        plain = fit_poisson_fe(_spec(), frame, TIGHT)
        corrected = fit_poisson_fe(_spec(), frame, FitOptions(tol=1e-12, demean_tol=1e-12, small_sample_correction=True))
        g = plain.n_clusters
        np.testing.assert_allclose(corrected.vcov, plain.vcov * g / (g - 1), rtol=1e-8)


class TestInvariances:
    """Properties of the fixed-effects fit."""

    def test_offset_shift(self, frame):
        base = fit_poisson_fe(_spec(), frame, TIGHT)
        shifted = frame.assign(log_population=frame["log_population"] + 3.0)
        moved = fit_poisson_fe(_spec(), shifted, TIGHT)
        np.testing.assert_allclose(moved.coef, base.coef, atol=1e-8)

    def test_zip_constant_added_to_exposure(self, frame):
        base = fit_poisson_fe(_spec(), frame, TIGHT)
        bump = frame["zip"].map({z: i * 0.37 for i, z in enumerate(sorted(frame["zip"].unique()))})
        moved = fit_poisson_fe(_spec(), frame.assign(A01=frame["A01"] + bump), TIGHT)
        assert moved.coef_of("A01") == pytest.approx(base.coef_of("A01"), abs=1e-8)

    def test_score_identity(self, frame):
        fit = fit_poisson_fe(_spec(), frame, TIGHT)
        observed = frame.loc[fit.used, "deaths"].sum()
        assert fit.mu.sum() == pytest.approx(observed, rel=1e-6)

    def test_working_design_is_demeaned(self, frame):
        fit = fit_poisson_fe(_spec(), frame, TIGHT)
        used = frame[fit.used]
        for column in ("zip", "year"):
            codes = factorize(used[column])
            totals = np.bincount(codes, weights=fit.working_weights)
            for j in range(fit.design.shape[1]):
                sums = np.bincount(codes, weights=fit.working_weights * fit.design[:, j])
                np.testing.assert_allclose(sums / totals, 0.0, atol=1e-8)

    def test_duplicated_rows_with_half_weights(self, frame):
        base = fit_poisson_fe(_spec(), frame, TIGHT)
        doubled = pd.concat([frame, frame], ignore_index=True).assign(w=0.5)
        moved = fit_poisson_fe(_spec(weights="w"), doubled, TIGHT)
        np.testing.assert_allclose(moved.coef, base.coef, rtol=1e-7, atol=1e-10)

    def test_vcov_symmetric(self, frame):
        fit = fit_poisson_fe(_spec(), frame, TIGHT)
        np.testing.assert_allclose(fit.vcov, fit.vcov.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(fit.vcov) > -1e-12)


class TestFailureModes:
    """Errors and degenerate inputs."""

    def test_all_zero_zip_is_dropped(self, frame):
        first_zip = sorted(frame["zip"].unique())[0]
        zeroed = frame.assign(deaths=np.where(frame["zip"] == first_zip, 0.0, frame["deaths"]))
        fit = fit_poisson_fe(_spec(), zeroed, TIGHT)
        assert fit.dropped_groups == 1
        assert not fit.used[(zeroed["zip"] == first_zip).to_numpy()].any()

    def test_absorbed_exposure(self, frame):
        constant = frame["zip"].map({z: float(i) for i, z in enumerate(sorted(frame["zip"].unique()))})
        with pytest.raises(ZeroVarianceError):
            fit_poisson_fe(_spec(), frame.assign(A01=constant), TIGHT)

    def test_identical_exposures(self, frame):
        with pytest.raises(CollinearityError):
            fit_poisson_fe(_spec(exposures=["A01", "copy"]), frame.assign(copy=frame["A01"] * 2.0), TIGHT)

    def test_collinear_covariate_is_dropped(self, frame):
        fit = fit_poisson_fe(_spec(covariates=COVARIATES + ["twice"]), frame.assign(twice=frame["pct_65p"] * 2), TIGHT)
        assert fit.collinear == ["twice"]
        assert "twice" not in fit.names

    def test_iteration_limit(self, frame):
        with pytest.raises(ConvergenceError):
            fit_poisson_fe(_spec(), frame, FitOptions(max_iter=1))

    def test_cluster_must_nest_zip(self, frame):
        shuffled = frame.assign(county=np.arange(len(frame)) % 3)
        with pytest.raises(ValueError):
            fit_poisson_fe(_spec(cluster="county"), shuffled, TIGHT)

    def test_single_cluster(self):
        with pytest.raises(EstimationError):
            sandwich(np.eye(1), np.ones((4, 1)), np.zeros(4, dtype=int))


class TestReportedIncreases:
    """Published coefficients map onto their published percent increases."""

    def test_table(self):
        table = pd.read_csv(FIXTURES_DIR / "reported_screen.csv")
        assert len(table) > 40
        for row in table.itertuples():
            change = rate_increase(row.coefficient, 0.0)
            assert abs(change.increase_pct - row.increase_pct) < 0.015, row.analyte
