"""
Penalized B-spline exposure-response curves for a Poisson outcome with absorbed fixed
effects.

The spline block carries a second-order difference penalty; covariates and fixed
effects are unpenalized, so every penalized IRLS step can demean the working response
and design by the fixed effects and solve the remaining penalized least-squares
problem as an augmented system by QR. The first spline coefficient is held at zero
since the fixed effects absorb the constant.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.special import xlogy
from scipy.stats import gaussian_kde

from src.data.panel import OFFSET_COLUMN, OUTCOME_COLUMN, PRIMARY_COVARIATES, ZipYearPanel
from src.doseresponse.basis import BSplineBasis, difference_penalty
from src.regression.feglm import (
    FitOptions,
    RegressionSpec,
    complete_rows,
    demean,
    drop_all_zero_levels,
    factorize,
    poisson_deviance,
    screen_collinear,
)
from src.utils.errors import ConvergenceError, EstimationError, SingularMatrixError
from src.utils.logging import get_logger


logger = get_logger(__name__)


RANK_TOL = 1e-13

CURVE_COLUMNS = [
    "grid", "grid_raw", "fitted_link", "fitted_response", "derivative", "within_p99", "mcl",
]


@dataclass
class GamFit:
    """Fitted penalized spline with its smoothing diagnostics.

    ``coefs`` is the full spline coefficient vector (first entry fixed at 0). The
    curve is reported relative to its value at ``reference``.
    """

    basis: BSplineBasis
    coefs: np.ndarray
    lam: float
    edf: float
    edf_total: float
    covariate_coefs: Dict[str, float]
    deviance: float
    penalized_deviance: float
    gcv: float
    n_obs: int
    iterations: int
    converged: bool
    reference: float = 0.0
    design: Optional[np.ndarray] = field(default=None, repr=False)
    fixed_part: Optional[np.ndarray] = field(default=None, repr=False)
    y: Optional[np.ndarray] = field(default=None, repr=False)
    penalty: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def knots(self) -> np.ndarray:
        return self.basis.knots

    @property
    def degree(self) -> int:
        return self.basis.degree

    @property
    def theta(self) -> np.ndarray:
        """Free parameters: spline coefficients 2.. followed by covariate coefficients."""
        return np.concatenate([self.coefs[1:], list(self.covariate_coefs.values())])

    def _raw_link(self, x: Sequence[float]) -> np.ndarray:
        return self.basis.design(x) @ self.coefs

    def link(self, x: Sequence[float]) -> np.ndarray:
        """f(x) - f(reference) on the log-rate scale, covariates held at zero."""
        ref = self.basis.clamp([self.reference])
        return self._raw_link(x) - self._raw_link(ref)[0]

    def link_derivative(self, x: Sequence[float]) -> np.ndarray:
        return self.basis.derivative_design(x) @ self.coefs

    def response(self, x: Sequence[float]) -> np.ndarray:
        return np.exp(self.link(x))

    def penalized_loglik(self, theta: Optional[np.ndarray] = None) -> float:
        """Poisson log-likelihood (up to a constant) minus the penalty, fixed effects held."""
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        mu = np.exp(self.fixed_part + self.design @ theta)
        return float((xlogy(self.y, mu) - mu).sum() - 0.5 * self.lam * theta @ self.penalty @ theta)

    def gradient(self, theta: Optional[np.ndarray] = None) -> np.ndarray:
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        mu = np.exp(self.fixed_part + self.design @ theta)
        return self.design.T @ (self.y - mu) - self.lam * self.penalty @ theta

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "edf": self.edf,
            "edf_total": self.edf_total,
            "deviance": self.deviance,
            "gcv": self.gcv,
            "n_obs": self.n_obs,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_basis": self.basis.n_basis,
        }


def _penalized_solve(
    M_t: np.ndarray,
    z_t: np.ndarray,
    W: np.ndarray,
    root_penalty: np.ndarray,
    lam: float,
):
    sqrt_w = np.sqrt(W)
    A = np.vstack([M_t * sqrt_w[:, None], np.sqrt(lam) * root_penalty])
    b = np.concatenate([z_t * sqrt_w, np.zeros(root_penalty.shape[0])])
    Q, R = scipy.linalg.qr(A, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= RANK_TOL * diag.max():
        raise SingularMatrixError(
            "Penalized system is numerically singular", {"lam": lam, "min_pivot": float(diag.min())}
        )
    theta = scipy.linalg.solve_triangular(R, Q.T @ b)
    return theta, Q, R


def fit_pspline(
    y: np.ndarray,
    exposure: np.ndarray,
    covariates: Optional[np.ndarray] = None,
    offset: Optional[np.ndarray] = None,
    factors: Sequence[np.ndarray] = (),
    lam: float = 1.0,
    basis: Optional[BSplineBasis] = None,
    n_knots: int = 20,
    degree: int = 3,
    covariate_names: Optional[Sequence[str]] = None,
    options: Optional[FitOptions] = None,
    reference: float = 0.0,
) -> GamFit:
    """
    Penalized IRLS for log E[y] = offset + f(exposure) + X g + fixed effects.

    Args:
        y: Counts
        exposure: Exposure values
        covariates: (n, p) unpenalized covariates
        offset: Log-scale offset
        factors: Fixed-effect factor values
        lam: Smoothing parameter, >= 0
        basis: Spline basis (built from the exposure when omitted)
        n_knots: Interior knots for a new basis
        degree: Degree for a new basis
        covariate_names: Names of the covariate columns
        options: Convergence settings shared with the unpenalized fit
        reference: Exposure value at which the reported curve is zero

    Raises:
        ConvergenceError: When the penalized deviance does not settle
        SingularMatrixError: When the penalized system cannot be solved
    """
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    options = options or FitOptions()
    y = np.asarray(y, dtype=float)
    x = np.asarray(exposure, dtype=float)
    n = y.shape[0]
    X = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(n, -1)
    covariate_names = list(covariate_names) if covariate_names is not None else [f"x{j}" for j in range(X.shape[1])]
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    basis = basis or BSplineBasis.from_data(x, n_interior=n_knots, degree=degree)

    factor_codes = [factorize(f) for f in factors]
    keep, _ = drop_all_zero_levels(y, factor_codes)
    y, x, X, offset = y[keep], x[keep], X[keep], offset[keep]
    factor_codes = [factorize(f[keep]) for f in factor_codes]

    B = basis.design(x)[:, 1:]
    spline_names = [f"spline_{j}" for j in range(1, basis.n_basis)]
    M = np.column_stack([B, X])
    names = spline_names + covariate_names

    mu = y + 0.5
    eta = np.log(mu)
    excluded = screen_collinear(M, names, spline_names, factor_codes, mu, options)
    if excluded.any():
        logger.debug("collinear_terms_dropped", terms=[names[j] for j in np.flatnonzero(excluded)])
    M = M[:, ~excluded]
    kept_covariates = [c for c, e in zip(covariate_names, excluded[len(spline_names):]) if not e]

    n_spline = len(spline_names)
    root = np.zeros((0, M.shape[1]))
    D = difference_penalty(basis)[:, 1:]
    if D.shape[0]:
        root = np.hstack([D, np.zeros((D.shape[0], M.shape[1] - n_spline))])
    penalty = root.T @ root

    def penalized(dev: float, theta: np.ndarray) -> float:
        return dev + lam * float(theta @ penalty @ theta)

    pdev = np.inf
    theta = np.zeros(M.shape[1])
    converged = False
    iteration = 0
    for iteration in range(1, options.max_iter + 1):
        W = mu
        z = eta - offset + (y - mu) / mu
        stacked = demean(np.column_stack([z, M]), factor_codes, W, options.demean_tol, options.demean_max_iter)
        z_t, M_t = stacked[:, 0], stacked[:, 1:]

        theta_new, _, _ = _penalized_solve(M_t, z_t, W, root, lam)
        eta_new = z - (z_t - M_t @ theta_new) + offset
        mu_new = np.exp(eta_new)
        dev_new = poisson_deviance(y, mu_new)
        pdev_new = penalized(dev_new, theta_new)

        halvings = 0
        while iteration > 1 and (not np.isfinite(pdev_new) or pdev_new > pdev) and halvings < 30:
            eta_new = (eta + eta_new) / 2.0
            theta_new = (theta + theta_new) / 2.0
            mu_new = np.exp(eta_new)
            dev_new = poisson_deviance(y, mu_new)
            pdev_new = penalized(dev_new, theta_new)
            halvings += 1
        if not np.isfinite(pdev_new):
            raise ConvergenceError("Penalized deviance is not finite", {"iteration": iteration, "lam": lam})

        change = abs(pdev_new - pdev) / (abs(pdev_new) + 0.1)
        eta, mu, theta, pdev, deviance = eta_new, mu_new, theta_new, pdev_new, dev_new
        if change < options.tol:
            converged = True
            break

    if not converged:
        raise ConvergenceError(
            f"Penalized IRLS did not converge in {options.max_iter} iterations", {"lam": lam}
        )

    # Influence-matrix trace at the final weights
    W = mu
    M_t = demean(M, factor_codes, W, options.demean_tol, options.demean_max_iter)
    _, Q, R = _penalized_solve(M_t, np.zeros(len(y)), W, root, lam)
    Q1 = Q[: len(y)]
    influence = scipy.linalg.solve_triangular(R, (Q1.T @ Q1) @ R)
    edf_terms = np.diag(influence)
    n_fe = sum(int(c.max()) + 1 for c in factor_codes) - max(len(factor_codes) - 1, 0)
    edf_total = float(edf_terms.sum()) + n_fe
    n_obs = len(y)
    gcv = n_obs * deviance / (n_obs - edf_total) ** 2 if n_obs > edf_total else np.inf

    coefs = np.concatenate([[0.0], theta[:n_spline]])
    return GamFit(
        basis=basis,
        coefs=coefs,
        lam=float(lam),
        edf=float(edf_terms[:n_spline].sum()),
        edf_total=edf_total,
        covariate_coefs=dict(zip(kept_covariates, theta[n_spline:].tolist())),
        deviance=float(deviance),
        penalized_deviance=float(pdev),
        gcv=float(gcv),
        n_obs=n_obs,
        iterations=iteration,
        converged=converged,
        reference=reference,
        design=M,
        fixed_part=eta - M @ theta,
        y=y,
        penalty=penalty,
    )


@dataclass
class LambdaSelection:
    """Outcome of the GCV grid search."""

    lam: float
    fit: GamFit
    table: pd.DataFrame
    at_boundary: bool


def lambda_grid(n: int = 40, lo: float = 1e-4, hi: float = 1e8) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


def select_lambda(
    y: np.ndarray,
    exposure: np.ndarray,
    covariates: Optional[np.ndarray] = None,
    offset: Optional[np.ndarray] = None,
    factors: Sequence[np.ndarray] = (),
    grid: Optional[Sequence[float]] = None,
    n_knots: int = 20,
    degree: int = 3,
    covariate_names: Optional[Sequence[str]] = None,
    options: Optional[FitOptions] = None,
    reference: float = 0.0,
    map_fn: Callable = map,
) -> LambdaSelection:
    """
    Smoothing parameter minimising GCV over a log-spaced grid.

    Ties go to the smaller lambda. Grid points whose fit fails are skipped; a choice at
    either end of the grid is flagged.
    """
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    basis = BSplineBasis.from_data(exposure, n_interior=n_knots, degree=degree)

    def one(lam: float):
        try:
            return fit_pspline(
                y, exposure, covariates, offset, factors, lam, basis,
                covariate_names=covariate_names, options=options, reference=reference,
            )
        except EstimationError as e:
            logger.debug("lambda_fit_failed", lam=float(lam), error=str(e))
            return None

    fits = list(map_fn(one, list(grid)))
    table = pd.DataFrame(
        {
            "lam": grid,
            "edf": [f.edf if f else np.nan for f in fits],
            "gcv": [f.gcv if f else np.nan for f in fits],
        }
    )
    valid = [i for i, f in enumerate(fits) if f is not None and np.isfinite(f.gcv)]
    if not valid:
        raise EstimationError("No smoothing parameter on the grid produced a fit")

    best = min(valid, key=lambda i: (fits[i].gcv, i))
    at_boundary = best in (0, len(grid) - 1)
    if at_boundary:
        logger.warning("lambda_at_grid_boundary", lam=float(grid[best]))
    return LambdaSelection(lam=float(grid[best]), fit=fits[best], table=table, at_boundary=at_boundary)


def derivative_curve(fit: GamFit, grid: Sequence[float]) -> np.ndarray:
    """d/dA exp(f(A)) = exp(f(A)) f'(A), with covariates held at zero."""
    grid = np.asarray(grid, dtype=float)
    return fit.response(grid) * fit.link_derivative(grid)


@dataclass
class DoseResponseSettings:
    n_knots: int = 20
    degree: int = 3
    lam: Optional[float] = None
    n_lambda: int = 40
    lambda_min: float = 1e-4
    lambda_max: float = 1e8
    n_grid: int = 200
    reference: float = 0.0
    top_quantile: float = 0.99
    covariates: List[str] = field(default_factory=lambda: list(PRIMARY_COVARIATES))
    options: FitOptions = field(default_factory=FitOptions)


@dataclass
class DoseResponseResult:
    analyte: str
    fit: GamFit
    curve: pd.DataFrame
    density: pd.DataFrame
    selection: Optional[LambdaSelection] = None

    def summary(self) -> dict:
        row = {"analyte": self.analyte}
        row.update(self.fit.to_dict())
        row["lambda_at_boundary"] = int(self.selection.at_boundary) if self.selection else 0
        return row


def curve_table(
    fit: GamFit,
    panel: ZipYearPanel,
    analyte: str,
    observed: np.ndarray,
    n_grid: int = 200,
    top_quantile: float = 0.99,
    mcl: Optional[float] = None,
) -> pd.DataFrame:
    """Plot data for the fitted curve and its derivative over the fitted range."""
    grid = np.linspace(fit.basis.lower, fit.basis.upper, n_grid)
    cutoff = np.quantile(observed, top_quantile)
    return pd.DataFrame(
        {
            "grid": grid,
            "grid_raw": panel.to_native_units(analyte, grid),
            "fitted_link": fit.link(grid),
            "fitted_response": fit.response(grid),
            "derivative": derivative_curve(fit, grid),
            "within_p99": (grid <= cutoff).astype(int),
            "mcl": np.nan if mcl is None else float(mcl),
        },
        columns=CURVE_COLUMNS,
    )


def density_table(raw: np.ndarray, n_grid: int = 200, top_quantile: float = 0.99) -> pd.DataFrame:
    """Gaussian KDE of raw concentrations top-coded at the given quantile."""
    raw = np.asarray(raw, dtype=float)
    raw = raw[np.isfinite(raw)]
    cutoff = float(np.quantile(raw, top_quantile))
    topcoded = np.minimum(raw, cutoff)
    grid = np.linspace(topcoded.min(), cutoff, n_grid)
    try:
        density = gaussian_kde(topcoded)(grid)
    except (np.linalg.LinAlgError, ValueError):
        density = np.full(grid.shape, np.nan)
    return pd.DataFrame({"concentration": grid, "density": density})


def fit_exposure_response(
    panel: ZipYearPanel,
    analyte: str,
    settings: Optional[DoseResponseSettings] = None,
    mcl: Optional[float] = None,
    map_fn: Callable = map,
) -> DoseResponseResult:
    """Fit one analyte's curve on its complete rows and build its plot tables."""
    settings = settings or DoseResponseSettings()
    spec = RegressionSpec(exposures=[analyte], covariates=list(settings.covariates))
    data = panel.frame[complete_rows(panel.frame, spec)]

    arrays = dict(
        y=data[OUTCOME_COLUMN].to_numpy(dtype=float),
        exposure=data[analyte].to_numpy(dtype=float),
        covariates=data[list(settings.covariates)].to_numpy(dtype=float),
        offset=data[OFFSET_COLUMN].to_numpy(dtype=float),
        factors=[data["zip"].to_numpy(), data["year"].to_numpy()],
        covariate_names=list(settings.covariates),
        options=settings.options,
        reference=settings.reference,
    )

    selection = None
    if settings.lam is None:
        grid = lambda_grid(settings.n_lambda, settings.lambda_min, settings.lambda_max)
        selection = select_lambda(
            **arrays, grid=grid, n_knots=settings.n_knots, degree=settings.degree, map_fn=map_fn
        )
        fit = selection.fit
    else:
        fit = fit_pspline(**arrays, lam=settings.lam, n_knots=settings.n_knots, degree=settings.degree)

    observed = arrays["exposure"]
    curve = curve_table(fit, panel, analyte, observed, settings.n_grid, settings.top_quantile, mcl)
    density = density_table(panel.to_native_units(analyte, observed), settings.n_grid, settings.top_quantile)

    logger.info("dose_response_fitted", analyte=analyte, lam=fit.lam, edf=round(fit.edf, 3), n_obs=fit.n_obs)
    return DoseResponseResult(analyte=analyte, fit=fit, curve=curve, density=density, selection=selection)
