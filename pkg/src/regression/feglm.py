"""
Poisson regression with absorbed fixed effects.

The model is log E[y] = offset + Xb + alpha_i + delta_t. Each IRLS step solves the
weighted least-squares problem on the within-transformed design, where the fixed
effects are removed by alternating weighted group demeaning. Inference uses a
cluster-robust sandwich over the demeaned design.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp
from scipy.special import xlogy
from scipy.stats import norm

from src.data.panel import OFFSET_COLUMN, OUTCOME_COLUMN, ZipYearPanel
from src.utils.errors import (
    CollinearityError,
    ConvergenceError,
    EstimationError,
    SingularMatrixError,
    ZeroVarianceError,
)
from src.utils.logging import get_logger


logger = get_logger(__name__)


Z_95 = 1.959964


@dataclass
class FitOptions:
    """Numerical settings for the IRLS and demeaning loops."""

    tol: float = 1e-9
    max_iter: int = 100
    demean_tol: float = 1e-10
    demean_max_iter: int = 10_000
    collinearity_tol: float = 1e-10
    small_sample_correction: bool = False


@dataclass
class RegressionSpec:
    """Columns entering one fixed-effects Poisson regression.

    Exposures come first in the design, so a covariate collinear with an exposure is
    the one that gets dropped.
    """

    exposures: List[str]
    covariates: List[str] = field(default_factory=list)
    outcome: str = OUTCOME_COLUMN
    offset: Optional[str] = OFFSET_COLUMN
    fixed_effects: List[str] = field(default_factory=lambda: ["zip", "year"])
    cluster: Optional[str] = "zip"
    weights: Optional[str] = None
    intercept: bool = False

    def __post_init__(self) -> None:
        if not self.exposures:
            raise ValueError("RegressionSpec needs at least one exposure term")
        if len(self.fixed_effects) > 2:
            raise ValueError("At most two fixed-effect factors are supported")
        if self.intercept and self.fixed_effects:
            raise ValueError("An explicit intercept is only valid without fixed effects")

    @property
    def terms(self) -> List[str]:
        terms = list(self.exposures) + [c for c in self.covariates if c not in self.exposures]
        return (["intercept"] if self.intercept else []) + terms

    @property
    def columns(self) -> List[str]:
        cols = [self.outcome] + list(self.exposures) + list(self.covariates) + list(self.fixed_effects)
        for extra in (self.offset, self.cluster, self.weights):
            if extra is not None:
                cols.append(extra)
        return list(dict.fromkeys(cols))


@dataclass
class FitResult:
    """Estimates and diagnostics of one fit.

    ``vcov`` is the cluster-robust covariance over ``names``; ``vcov_model`` is the
    inverse information. ``used`` marks the input rows that entered the fit.
    """

    names: List[str]
    coef: np.ndarray
    vcov: np.ndarray
    vcov_model: np.ndarray
    exposures: List[str]
    mu: np.ndarray
    deviance: float
    n_obs: int
    dropped_groups: int
    iterations: int
    converged: bool
    used: np.ndarray
    n_clusters: int = 0
    collinear: List[str] = field(default_factory=list)
    design: Optional[np.ndarray] = field(default=None, repr=False)
    working_weights: Optional[np.ndarray] = field(default=None, repr=False)
    score_residuals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    @property
    def p(self) -> np.ndarray:
        return 2.0 * norm.sf(np.abs(self.z))

    @property
    def beta(self) -> Dict[str, float]:
        return {n: float(c) for n, c in zip(self.names, self.coef) if n in self.exposures}

    @property
    def gamma(self) -> Dict[str, float]:
        return {n: float(c) for n, c in zip(self.names, self.coef) if n not in self.exposures}

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"'{name}' is not a fitted term (collinear: {self.collinear})") from None

    def coef_of(self, name: str) -> float:
        return float(self.coef[self.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.index(name)])

    def p_of(self, name: str) -> float:
        return float(self.p[self.index(name)])

    def block(self, names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Coefficients and covariance restricted to ``names``."""
        idx = [self.index(n) for n in names]
        return self.coef[idx], self.vcov[np.ix_(idx, idx)]

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"coef": self.coef, "se": self.se, "z": self.z, "p": self.p},
            index=pd.Index(self.names, name="term"),
        )

    def to_dict(self) -> dict:
        return {
            "coef": dict(zip(self.names, self.coef.tolist())),
            "se": dict(zip(self.names, self.se.tolist())),
            "deviance": self.deviance,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "dropped_groups": self.dropped_groups,
            "iterations": self.iterations,
            "converged": self.converged,
            "collinear": self.collinear,
        }


@dataclass
class PercentChange:
    """Rate change in percent with its 95% interval."""

    increase_pct: float
    ci_lo: float
    ci_hi: float


def rate_increase(beta: float, se: float) -> PercentChange:
    """Percent change in the rate, (exp(b) - 1) * 100, with a normal 95% interval."""
    if se < 0:
        raise ValueError(f"se must be non-negative, got {se}")
    return PercentChange(
        increase_pct=float(np.expm1(beta) * 100.0),
        ci_lo=float(np.expm1(beta - Z_95 * se) * 100.0),
        ci_hi=float(np.expm1(beta + Z_95 * se) * 100.0),
    )


def factorize(values: Sequence) -> np.ndarray:
    """Integer codes 0..G-1 in sorted level order."""
    codes, _ = pd.factorize(pd.Series(values), sort=True)
    if (codes < 0).any():
        raise ValueError("Fixed-effect factor contains missing values")
    return codes.astype(np.int64)


def _indicator(codes: np.ndarray) -> sp.csr_matrix:
    n = codes.shape[0]
    return sp.csr_matrix(
        (np.ones(n), (np.arange(n), codes)), shape=(n, int(codes.max()) + 1 if n else 0)
    )


def demean(
    columns: np.ndarray,
    factors: Sequence[np.ndarray],
    weights: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> np.ndarray:
    """
    Remove weighted group means of up to two factors by alternating projections.

    Args:
        columns: (n,) or (n, k) array
        factors: Sequence of integer code arrays, one per factor
        weights: Non-negative row weights (unit when omitted)
        tol: Sweep tolerance, relative to max(1, sup|column|)
        max_iter: Maximum number of sweeps

    Returns:
        Demeaned array of the same shape

    Raises:
        ConvergenceError: When the sweeps do not settle within max_iter
    """
    x = np.array(columns, dtype=float, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    scale = np.abs(x).max(axis=0) if x.shape[0] else np.zeros(x.shape[1])
    if not factors:
        return x[:, 0] if squeeze else x

    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    projections = []
    for codes in factors:
        D = _indicator(np.asarray(codes))
        group_weight = D.T @ w
        inv = np.divide(1.0, group_weight, out=np.zeros_like(group_weight), where=group_weight > 0)
        projections.append((D, inv))

    def sweep(arr: np.ndarray) -> np.ndarray:
        for D, inv in projections:
            means = (D.T @ (w[:, None] * arr)) * inv[:, None]
            arr = arr - D @ means
        return arr

    x = sweep(x)
    if len(projections) == 1:
        return x[:, 0] if squeeze else x

    threshold = tol * np.maximum(1.0, scale)
    delta = np.inf
    for _ in range(max_iter):
        updated = sweep(x)
        delta_cols = np.abs(updated - x).max(axis=0)
        x = updated
        if np.all(delta_cols <= threshold):
            return x[:, 0] if squeeze else x
        delta = float(delta_cols.max())

    raise ConvergenceError(
        f"Demeaning did not converge in {max_iter} sweeps",
        {"last_delta": delta, "sweeps": max_iter},
    )


def drop_all_zero_levels(y: np.ndarray, factors: Sequence[np.ndarray]) -> Tuple[np.ndarray, int]:
    """
    Rows to keep after iteratively removing fixed-effect levels with an all-zero outcome.

    Returns:
        Tuple of (boolean keep mask, number of levels dropped)
    """
    keep = np.ones(y.shape[0], dtype=bool)
    dropped = 0
    if y.size == 0:
        return keep, dropped
    changed = True
    while changed:
        changed = False
        for codes in factors:
            sums = np.bincount(codes[keep], weights=y[keep], minlength=int(codes.max()) + 1)
            present = np.bincount(codes[keep], minlength=int(codes.max()) + 1) > 0
            zero_levels = present & (sums <= 0)
            if zero_levels.any():
                keep &= ~zero_levels[codes]
                dropped += int(zero_levels.sum())
                changed = True
    return keep, dropped


def find_collinear(xtx: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """
    Flag columns that are linear combinations of earlier columns.

    Runs a pivot-free Cholesky sweep on a (scaled) cross-product matrix and marks a
    column once its remaining pivot falls below ``tol``.
    """
    k = xtx.shape[0]
    R = np.zeros((k, k))
    excluded = np.zeros(k, dtype=bool)
    for j in range(k):
        r_jj = xtx[j, j] - sum(R[i, j] ** 2 for i in range(j) if not excluded[i])
        if r_jj < tol:
            excluded[j] = True
            continue
        r_jj = np.sqrt(r_jj)
        R[j, j] = r_jj
        for c in range(j + 1, k):
            value = xtx[j, c] - sum(R[i, j] * R[i, c] for i in range(j) if not excluded[i])
            R[j, c] = value / r_jj
    return excluded


def screen_collinear(
    X: np.ndarray,
    names: Sequence[str],
    protected: Sequence[str],
    factors: Sequence[np.ndarray],
    weights: np.ndarray,
    options: FitOptions,
) -> np.ndarray:
    """
    Mask of design columns to drop as collinear after absorbing the fixed effects.

    Columns are scaled by their raw weighted norm, so a pivot measures the share of a
    column left unexplained by the fixed effects and earlier columns.

    Raises:
        ZeroVarianceError: A protected column is fully absorbed by the fixed effects
        CollinearityError: A protected column is collinear with other columns
    """
    X_t = demean(X, factors, weights, options.demean_tol, options.demean_max_iter)
    raw_norm = np.einsum("ij,ij,i->j", X, X, weights)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(raw_norm > 0, 1.0 / np.sqrt(raw_norm), 0.0)
    xtx = (X_t * weights[:, None]).T @ X_t * np.outer(scale, scale)

    excluded = find_collinear(xtx, options.collinearity_tol)
    for j in np.flatnonzero(excluded):
        if names[j] in protected:
            if xtx[j, j] < options.collinearity_tol:
                raise ZeroVarianceError(
                    f"Exposure '{names[j]}' has no variation left after absorbing fixed effects",
                    {"term": names[j]},
                )
            raise CollinearityError(
                f"Exposure '{names[j]}' is collinear with other terms", {"term": names[j]}
            )
    return excluded


def _invert_spd(matrix: np.ndarray) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(matrix)
        inverse = scipy.linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    except scipy.linalg.LinAlgError as e:
        raise SingularMatrixError("Cross-product matrix is singular") from e
    return (inverse + inverse.T) / 2.0


def sandwich(
    bread: np.ndarray,
    scores: np.ndarray,
    clusters: Optional[np.ndarray] = None,
    small_sample_correction: bool = False,
) -> np.ndarray:
    """
    Cluster-robust sandwich ``bread @ meat @ bread``.

    Args:
        bread: Inverse of the information matrix
        scores: (n, k) per-row score contributions
        clusters: Cluster codes per row; each row is its own cluster when omitted
        small_sample_correction: Multiply by G/(G-1)
    """
    if clusters is None:
        summed = scores
    else:
        summed = np.asarray(_indicator(np.asarray(clusters)).T @ scores)
    n_clusters = summed.shape[0]
    if n_clusters < 2:
        raise EstimationError("Cluster-robust covariance needs at least two clusters")

    meat = summed.T @ summed
    vcov = bread @ meat @ bread
    if small_sample_correction:
        vcov *= n_clusters / (n_clusters - 1)
    return (vcov + vcov.T) / 2.0


def cluster_vcov(
    fit: FitResult,
    clusters: Optional[np.ndarray] = None,
    small_sample_correction: bool = False,
) -> np.ndarray:
    """
    Cluster-robust covariance of a converged fit for arbitrary cluster codes.

    Args:
        fit: Result of :func:`fit_poisson_arrays` or :func:`fit_poisson_fe`
        clusters: Codes for the used rows; one cluster per row when omitted
    """
    if not fit.converged:
        raise EstimationError("cluster_vcov requires a converged fit")
    if fit.design is None:
        raise EstimationError("Fit does not carry its working design")
    scores = fit.design * fit.score_residuals[:, None]
    return sandwich(fit.vcov_model, scores, clusters, small_sample_correction)


def poisson_deviance(y: np.ndarray, mu: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    unit = 2.0 * (xlogy(y, y / mu) - (y - mu))
    if weights is not None:
        unit = unit * weights
    return float(unit.sum())


def fit_poisson_arrays(
    y: np.ndarray,
    X: np.ndarray,
    names: Sequence[str],
    exposures: Optional[Sequence[str]] = None,
    offset: Optional[np.ndarray] = None,
    factors: Sequence[np.ndarray] = (),
    clusters: Optional[np.ndarray] = None,
    prior_weights: Optional[np.ndarray] = None,
    options: Optional[FitOptions] = None,
) -> FitResult:
    """
    Fit a Poisson model with up to two absorbed fixed-effect factors.

    Args:
        y: Counts, non-negative
        X: (n, k) design of exposures followed by covariates
        names: Column names of X
        exposures: Names whose collinearity is an error rather than a dropped column
        offset: Known log-scale offset
        factors: Integer codes of the fixed-effect factors
        clusters: Cluster codes; each row its own cluster when omitted
        prior_weights: Frequency weights
        options: Numerical settings

    Returns:
        FitResult over the rows kept after removing all-zero fixed-effect levels
    """
    options = options or FitOptions()
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    names = list(names)
    exposures = list(exposures) if exposures is not None else names[:1]
    offset = np.zeros_like(y) if offset is None else np.asarray(offset, dtype=float)
    prior = np.ones_like(y) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    factors = [np.asarray(f) for f in factors]

    if (y < 0).any():
        raise ValueError("Poisson outcome must be non-negative")

    positive = np.flatnonzero(prior > 0)
    keep, dropped_groups = drop_all_zero_levels(y[positive], [factorize(f[positive]) for f in factors])
    used = np.zeros(y.shape[0], dtype=bool)
    used[positive[keep]] = True
    if dropped_groups:
        logger.debug("all_zero_levels_dropped", levels=dropped_groups, rows=int((~keep).sum()))

    y_u, X_u, off_u, w_u = y[used], X[used], offset[used], prior[used]
    factors_u = [factorize(f[used]) for f in factors]
    if y_u.size == 0 or y_u.sum() <= 0:
        raise EstimationError("No observations with a positive outcome remain")

    # Start from mu = y + 0.5 and screen the design for collinearity once
    mu = y_u + 0.5
    eta = np.log(mu)
    excluded = screen_collinear(X_u, names, exposures, factors_u, w_u * mu, options)
    collinear = [names[j] for j in np.flatnonzero(excluded)]
    if collinear:
        logger.warning("collinear_terms_dropped", terms=collinear)
        X_u = X_u[:, ~excluded]
        names = [n for n, e in zip(names, excluded) if not e]

    deviance = np.inf
    beta = np.zeros(X_u.shape[1])
    converged = False
    iteration = 0
    for iteration in range(1, options.max_iter + 1):
        W = w_u * mu
        z = eta - off_u + (y_u - mu) / mu
        stacked = demean(np.column_stack([z, X_u]), factors_u, W, options.demean_tol, options.demean_max_iter)
        z_t, X_t = stacked[:, 0], stacked[:, 1:]

        sqrt_w = np.sqrt(W)
        beta_new, *_ = scipy.linalg.lstsq(X_t * sqrt_w[:, None], z_t * sqrt_w)
        eta_new = z - (z_t - X_t @ beta_new) + off_u
        mu_new = np.exp(eta_new)
        deviance_new = poisson_deviance(y_u, mu_new, w_u)

        halvings = 0
        while iteration > 1 and (not np.isfinite(deviance_new) or deviance_new > deviance) and halvings < 30:
            eta_new = (eta + eta_new) / 2.0
            beta_new = (beta + beta_new) / 2.0
            mu_new = np.exp(eta_new)
            deviance_new = poisson_deviance(y_u, mu_new, w_u)
            halvings += 1
        if not np.isfinite(deviance_new):
            raise ConvergenceError("Deviance is not finite", {"iteration": iteration})

        change = abs(deviance_new - deviance) / (abs(deviance_new) + 0.1)
        eta, mu, beta, deviance = eta_new, mu_new, beta_new, deviance_new
        if change < options.tol:
            converged = True
            break

    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge in {options.max_iter} iterations",
            {"iterations": options.max_iter, "deviance": deviance},
        )

    # Working design at the final means
    W = w_u * mu
    X_t = demean(X_u, factors_u, W, options.demean_tol, options.demean_max_iter)
    bread = _invert_spd((X_t * W[:, None]).T @ X_t)
    score_resid = w_u * (y_u - mu)

    cluster_codes = factorize(np.asarray(clusters)[used]) if clusters is not None else None
    vcov = sandwich(bread, X_t * score_resid[:, None], cluster_codes, options.small_sample_correction)
    n_clusters = int(cluster_codes.max()) + 1 if cluster_codes is not None else int(y_u.size)

    logger.debug("poisson_fe_converged", iterations=iteration, deviance=deviance, n_obs=int(y_u.size))
    return FitResult(
        names=names,
        coef=np.asarray(beta, dtype=float),
        vcov=vcov,
        vcov_model=bread,
        exposures=[e for e in exposures if e in names],
        mu=mu,
        deviance=deviance,
        n_obs=int(y_u.size),
        dropped_groups=dropped_groups,
        iterations=iteration,
        converged=converged,
        used=used,
        n_clusters=n_clusters,
        collinear=collinear,
        design=X_t,
        working_weights=W,
        score_residuals=score_resid,
    )


def complete_rows(frame: pd.DataFrame, spec: RegressionSpec) -> np.ndarray:
    """Boolean mask of rows with every column of the spec observed and a finite offset."""
    missing = [c for c in spec.columns if c not in frame.columns]
    if missing:
        raise KeyError(f"Columns not in panel: {missing}")
    mask = frame[spec.columns].notna().all(axis=1).to_numpy()
    if spec.offset is not None:
        mask &= np.isfinite(frame[spec.offset].to_numpy(dtype=float))
    return mask


def fit_poisson_fe(
    spec: RegressionSpec,
    panel: ZipYearPanel | pd.DataFrame,
    options: Optional[FitOptions] = None,
) -> FitResult:
    """
    Fit a regression spec on the complete rows of a panel.

    The returned ``used`` mask is aligned with the rows of the panel frame.
    """
    frame = panel.frame if isinstance(panel, ZipYearPanel) else panel
    rows = complete_rows(frame, spec)
    data = frame[rows]

    if spec.cluster is not None and spec.fixed_effects and spec.cluster != spec.fixed_effects[0]:
        spread = data.groupby(spec.fixed_effects[0])[spec.cluster].nunique()
        if (spread > 1).any():
            raise ValueError(f"Cluster '{spec.cluster}' must nest '{spec.fixed_effects[0]}'")

    terms = [t for t in spec.terms if t != "intercept"]
    X = data[terms].to_numpy(dtype=float)
    if spec.intercept:
        X = np.column_stack([np.ones(len(data)), X])

    fit = fit_poisson_arrays(
        y=data[spec.outcome].to_numpy(dtype=float),
        X=X,
        names=spec.terms,
        exposures=spec.exposures,
        offset=data[spec.offset].to_numpy(dtype=float) if spec.offset else None,
        factors=[factorize(data[fe]) for fe in spec.fixed_effects],
        clusters=data[spec.cluster].to_numpy() if spec.cluster else None,
        prior_weights=data[spec.weights].to_numpy(dtype=float) if spec.weights else None,
        options=options,
    )

    used = np.zeros(len(frame), dtype=bool)
    used[np.flatnonzero(rows)[fit.used]] = True
    fit.used = used
    return fit
