"""
Dense-dummy reference fit for checking the absorbed fixed-effects estimator.

Every fixed effect enters as an explicit indicator column and the model is fit with
statsmodels' Poisson GLM. Only practical for small panels.
"""

import warnings
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from statsmodels.tools.sm_exceptions import ConvergenceWarning

from src.regression.feglm import FitResult, drop_all_zero_levels, factorize
from src.utils.errors import EstimationError, SingularMatrixError
from src.utils.logging import get_logger


logger = get_logger(__name__)


def dense_design(X: np.ndarray, zip_codes: np.ndarray, year_codes: np.ndarray) -> np.ndarray:
    """``[X, one dummy per zip, one dummy per year except the first]``."""
    X = np.asarray(X, dtype=float).reshape(len(zip_codes), -1)
    zips = np.eye(int(zip_codes.max()) + 1)[zip_codes]
    years = np.eye(int(year_codes.max()) + 1)[year_codes][:, 1:]
    return np.column_stack([X, zips, years])


def oracle_fit_dense(
    y: np.ndarray,
    X_dense: np.ndarray,
    names: Sequence[str],
    offset: Optional[np.ndarray] = None,
    clusters: Optional[np.ndarray] = None,
    small_sample_correction: bool = False,
) -> FitResult:
    """
    Fit a Poisson GLM on an explicit design and report its leading ``len(names)`` columns.

    The covariance is the cluster sandwich computed from the full design; its block for
    the leading columns is what the absorbed estimator reports.

    Raises:
        SingularMatrixError: When the dense design is rank deficient
    """
    y = np.asarray(y, dtype=float)
    X_dense = np.asarray(X_dense, dtype=float)
    k = len(names)
    if np.linalg.matrix_rank(X_dense) < X_dense.shape[1]:
        raise SingularMatrixError("Dense design is rank deficient")

    model = sm.GLM(y, X_dense, family=sm.families.Poisson(), offset=offset)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        result = model.fit(method="IRLS", maxiter=200, tol=1e-12)

    mu = np.asarray(result.mu, dtype=float)
    information = X_dense.T @ (mu[:, None] * X_dense)
    bread = np.linalg.inv(information)
    scores = X_dense * (y - mu)[:, None]
    groups = np.arange(len(y)) if clusters is None else np.asarray(clusters)
    summed = pd.DataFrame(scores).groupby(groups).sum().to_numpy()
    n_clusters = summed.shape[0]
    if n_clusters < 2:
        raise EstimationError("Cluster-robust covariance needs at least two clusters")
    vcov = bread @ (summed.T @ summed) @ bread
    if small_sample_correction:
        vcov *= n_clusters / (n_clusters - 1)

    logger.debug("oracle_fit", n=len(y), columns=X_dense.shape[1], deviance=float(result.deviance))
    return FitResult(
        names=list(names),
        coef=np.asarray(result.params[:k], dtype=float),
        vcov=vcov[:k, :k],
        vcov_model=bread[:k, :k],
        exposures=list(names[:1]),
        mu=mu,
        deviance=float(result.deviance),
        n_obs=len(y),
        dropped_groups=0,
        iterations=int(result.fit_history.get("iteration", 0)),
        converged=bool(result.converged),
        used=np.ones(len(y), dtype=bool),
        n_clusters=n_clusters,
    )


def oracle_fit(
    frame: pd.DataFrame,
    terms: Sequence[str],
    outcome: str = "deaths",
    offset: str = "log_population",
    small_sample_correction: bool = False,
) -> FitResult:
    """
    Reference zip + year fixed-effects fit of ``outcome`` on ``terms``, clustered by zip.

    Rows with missing terms are dropped, then zip and year levels whose outcome is all
    zero, mirroring the absorbed estimator.
    """
    columns = list(terms) + [outcome, offset, "zip", "year"]
    data = frame.dropna(subset=columns).reset_index(drop=True)
    y = data[outcome].to_numpy(dtype=float)
    zip_codes = factorize(data["zip"])
    year_codes = factorize(data["year"])
    keep, dropped = drop_all_zero_levels(y, [zip_codes, year_codes])
    data = data[keep].reset_index(drop=True)

    zip_codes = factorize(data["zip"])
    year_codes = factorize(data["year"])
    X_dense = dense_design(data[list(terms)].to_numpy(dtype=float), zip_codes, year_codes)
    fit = oracle_fit_dense(
        data[outcome].to_numpy(dtype=float),
        X_dense,
        names=list(terms),
        offset=data[offset].to_numpy(dtype=float),
        clusters=zip_codes,
        small_sample_correction=small_sample_correction,
    )
    fit.dropped_groups = dropped
    return fit
