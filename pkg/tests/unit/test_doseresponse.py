"""
Unit tests for penalized spline exposure-response curves.
"""

import numpy as np
import pytest

from src.doseresponse.basis import BSplineBasis, bspline_basis, difference_penalty
from src.doseresponse.pspline import (
    CURVE_COLUMNS,
    DoseResponseSettings,
    density_table,
    derivative_curve,
    fit_exposure_response,
    fit_pspline,
    lambda_grid,
    select_lambda,
)
from src.regression.feglm import FitOptions, RegressionSpec, factorize, fit_poisson_fe
from src.screening.screen import ScreeningSettings
from src.synth.oracle import dense_design, oracle_fit_dense


TIGHT = FitOptions(tol=1e-12, demean_tol=1e-12)


@pytest.fixture
def curved(rng):
    """Counts with a sine-shaped exposure effect and zip/year effects."""
    n = 400
    x = rng.uniform(-2.0, 2.0, n)
    zips = rng.integers(0, 40, n)
    years = rng.integers(0, 5, n)
    zip_effect = rng.normal(0.0, 0.3, 40)
    mu = np.exp(5.0 + np.sin(x) + zip_effect[zips] + 0.05 * years)
    return {"y": rng.poisson(mu).astype(float), "exposure": x, "factors": [zips, years]}


class TestBasis:
    """Tests for the clamped B-spline basis."""

    def test_partition_of_unity(self, rng):
        x = rng.normal(size=200)
        B = bspline_basis(x, k=10)
        assert B.shape == (200, 14)
        np.testing.assert_allclose(B.sum(axis=1), 1.0)

    def test_boundary_knots_repeated(self, rng):
        x = rng.normal(size=100)
        basis = BSplineBasis.from_data(x, n_interior=5)
        assert np.all(basis.knots[:4] == x.min())
        assert np.all(basis.knots[-4:] == x.max())
        assert basis.n_basis == 9

    def test_values_outside_range_are_clamped(self):
        basis = BSplineBasis.from_data(np.linspace(0.0, 1.0, 50), n_interior=3)
        np.testing.assert_allclose(basis.design([-5.0, 7.0]), basis.design([0.0, 1.0]))

    def test_degenerate_exposure(self):
        with pytest.raises(ValueError):
            BSplineBasis.from_data(np.ones(10))
        with pytest.raises(ValueError):
            BSplineBasis.from_data(np.arange(10.0), n_interior=0)

    def test_greville_reproduces_lines(self, rng):
        basis = BSplineBasis.from_data(rng.uniform(size=300), n_interior=6)
        x = np.linspace(basis.lower, basis.upper, 25)
        coefs = 2.0 - 3.0 * basis.greville()
        np.testing.assert_allclose(basis.design(x) @ coefs, 2.0 - 3.0 * x, atol=1e-10)


class TestDifferencePenalty:
    """Tests for the second-order penalty."""

    def test_affine_null_space(self, rng):
        basis = BSplineBasis.from_data(rng.exponential(size=300), n_interior=8)
        D = difference_penalty(basis)
        g = basis.greville()
        np.testing.assert_allclose(D @ (1.5 + 0.7 * g), 0.0, atol=1e-9)
        assert np.abs(D @ g**2).max() > 1e-3

    def test_equal_spacing_matches_second_differences(self):
        basis = BSplineBasis(knots=np.arange(-3.0, 13.0), degree=3)
        D = difference_penalty(basis)
        np.testing.assert_allclose(D, np.diff(np.eye(basis.n_basis), 2, axis=0), atol=1e-12)

    def test_too_few_coefficients(self):
        basis = BSplineBasis(knots=np.array([0.0, 0.0, 1.0, 1.0]), degree=1)
        assert difference_penalty(basis).shape == (0, 2)


class TestFitPspline:
    """Tests for the penalized Poisson fit."""

    def test_stationary_point(self, curved):
        fit = fit_pspline(**curved, lam=1.0, n_knots=8, options=TIGHT)
        assert fit.converged
        scale = max(1.0, np.abs(fit.design.T @ fit.y).max())
        assert np.abs(fit.gradient()).max() < 1e-6 * scale

    def test_maximizes_penalized_likelihood(self, curved, rng):
        fit = fit_pspline(**curved, lam=1.0, n_knots=8, options=TIGHT)
        best = fit.penalized_loglik()
        for _ in range(5):
            step = 1e-2 * rng.normal(size=fit.theta.size)
            assert fit.penalized_loglik(fit.theta + step) <= best

    def test_unpenalized_matches_dense_glm(self, curved):
        fit = fit_pspline(**curved, lam=0.0, n_knots=8, options=TIGHT)
        zips, years = (factorize(f) for f in curved["factors"])
        spline = fit.basis.design(curved["exposure"])[:, 1:]
        names = [f"spline_{j}" for j in range(1, fit.basis.n_basis)]
        oracle = oracle_fit_dense(curved["y"], dense_design(spline, zips, years), names)

        np.testing.assert_allclose(fit.coefs[1:], oracle.coef, rtol=1e-6, atol=1e-8)
        assert fit.deviance == pytest.approx(oracle.deviance, rel=1e-8)
        assert fit.edf == pytest.approx(len(names), rel=1e-8)

    def test_tracks_the_sine(self, curved):
        fit = fit_pspline(**curved, lam=1.0, n_knots=8)
        grid = np.linspace(-1.5, 1.5, 13)
        np.testing.assert_allclose(fit.link(grid), np.sin(grid), atol=0.1)

    def test_reference_is_zero(self, curved):
        fit = fit_pspline(**curved, lam=1.0, n_knots=8, reference=0.5)
        assert fit.link([0.5])[0] == pytest.approx(0.0, abs=1e-12)

    def test_edf_decreases_with_lambda(self, curved):
        edfs = [fit_pspline(**curved, lam=lam, n_knots=8).edf for lam in (1e-2, 1.0, 1e2, 1e4)]
        assert all(a > b for a, b in zip(edfs, edfs[1:]))

    def test_heavy_penalty_is_linear(self, prepared_panel):
        covariates = ScreeningSettings().covariates
        linear = fit_poisson_fe(RegressionSpec(exposures=["A01"], covariates=covariates), prepared_panel, TIGHT)
        frame = prepared_panel.frame
        fit = fit_pspline(
            y=frame["deaths"].to_numpy(dtype=float),
            exposure=frame["A01"].to_numpy(dtype=float),
            covariates=frame[covariates].to_numpy(dtype=float),
            offset=frame["log_population"].to_numpy(dtype=float),
            factors=[frame["zip"].to_numpy(), frame["year"].to_numpy()],
            lam=1e10,
            n_knots=6,
            covariate_names=covariates,
            options=TIGHT,
        )
        assert fit.edf == pytest.approx(1.0, abs=0.05)
        slopes = fit.link_derivative(np.linspace(-1.0, 1.0, 5))
        np.testing.assert_allclose(slopes, linear.coef_of("A01"), rtol=1e-3, atol=1e-4)

    def test_derivative_curve(self, curved):
        fit = fit_pspline(**curved, lam=1.0, n_knots=8)
        grid = np.linspace(-1.0, 1.0, 9)
        h = 1e-5
        numeric = (fit.response(grid + h) - fit.response(grid - h)) / (2 * h)
        np.testing.assert_allclose(derivative_curve(fit, grid), numeric, rtol=1e-4, atol=1e-6)

    def test_negative_lambda(self, curved):
        with pytest.raises(ValueError):
            fit_pspline(**curved, lam=-1.0)


class TestSelectLambda:
    """Tests for the GCV grid search."""

    def test_grid(self):
        grid = lambda_grid(5, 1e-2, 1e2)
        np.testing.assert_allclose(grid, [1e-2, 1e-1, 1.0, 1e1, 1e2])

    def test_minimum_of_gcv(self, curved):
        grid = lambda_grid(6, 1e-3, 1e4)
        selection = select_lambda(**curved, grid=grid, n_knots=8)
        assert selection.lam in grid
        best = selection.table["gcv"].min()
        assert selection.fit.gcv == pytest.approx(best)
        assert list(selection.table.columns) == ["lam", "edf", "gcv"]

    def test_linear_truth_has_no_interior_turning_point(self, rng):
        n = 600
        x = rng.uniform(-2.0, 2.0, n)
        zips = rng.integers(0, 30, n)
        years = rng.integers(0, 5, n)
        mu = np.exp(5.0 + 0.8 * x + rng.normal(0.0, 0.3, 30)[zips])
        y = rng.poisson(mu).astype(float)

        selection = select_lambda(
            y=y, exposure=x, factors=[zips, years], grid=lambda_grid(8, 1e-2, 1e6), n_knots=10
        )
        slopes = derivative_curve(selection.fit, np.linspace(x.min(), x.max(), 201))
        assert np.all(slopes > 0)

    def test_single_point_is_boundary(self, curved):
        selection = select_lambda(**curved, grid=[1.0], n_knots=8)
        assert selection.at_boundary


class TestExposureResponse:
    """Tests for the per-analyte curve and its plot tables."""

    def test_fixed_lambda(self, prepared_panel):
        settings = DoseResponseSettings(lam=10.0, n_knots=6, n_grid=50)
        result = fit_exposure_response(prepared_panel, "A01", settings, mcl=15.0)
        assert list(result.curve.columns) == CURVE_COLUMNS
        assert len(result.curve) == 50
        assert (result.curve["mcl"] == 15.0).all()
        np.testing.assert_allclose(
            result.curve["grid_raw"], prepared_panel.to_native_units("A01", result.curve["grid"].to_numpy())
        )
        assert result.curve["within_p99"].iloc[0] == 1 and result.curve["within_p99"].iloc[-1] == 0
        assert result.selection is None
        assert result.summary()["lambda_at_boundary"] == 0

    def test_selected_lambda(self, prepared_panel):
        settings = DoseResponseSettings(n_knots=6, n_lambda=4, lambda_min=1e-2, lambda_max=1e4, n_grid=20)
        result = fit_exposure_response(prepared_panel, "A01", settings)
        assert result.selection is not None
        assert result.fit.lam == result.selection.lam
        assert len(result.selection.table) == 4

    def test_density_table(self, rng):
        raw = rng.lognormal(size=500)
        table = density_table(raw, n_grid=30)
        assert list(table.columns) == ["concentration", "density"]
        assert table["concentration"].iloc[-1] == pytest.approx(np.quantile(raw, 0.99))
        assert (table["density"] >= 0).all()
