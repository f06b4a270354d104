"""
Co-occurrence structure of analytes: pairwise correlations, a thresholded network and
a classical (Torgerson) MDS embedding of 1 - |r|.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data.panel import ZipYearPanel
from src.utils.logging import get_logger


logger = get_logger(__name__)


MIN_PAIR_ROWS = 3
EIGEN_RELATIVE_TOL = 1e-10
AXIS_NAMES = ["x", "y", "z"]


@dataclass
class CorrelationMatrix:
    """Pairwise Pearson correlations on pairwise-complete rows."""

    analytes: List[str]
    r: pd.DataFrame
    n: pd.DataFrame

    def to_long(self) -> pd.DataFrame:
        """One row per unordered pair (i before j in analyte order)."""
        i, j = np.triu_indices(len(self.analytes), k=1)
        names = np.asarray(self.analytes, dtype=object)
        return pd.DataFrame(
            {
                "i": names[i],
                "j": names[j],
                "r": self.r.to_numpy()[i, j],
                "n": self.n.to_numpy()[i, j],
            }
        )


def correlation_matrix(
    panel: ZipYearPanel | pd.DataFrame,
    analytes: Optional[Sequence[str]] = None,
    min_rows: int = MIN_PAIR_ROWS,
) -> CorrelationMatrix:
    """
    Pearson r over rows where both analytes are observed.

    Pairs with fewer than ``min_rows`` complete rows are missing; the diagonal is 1.
    """
    frame = panel.frame if isinstance(panel, ZipYearPanel) else panel
    if analytes is None:
        analytes = panel.analytes if isinstance(panel, ZipYearPanel) else list(frame.columns)
    analytes = list(analytes)
    if len(analytes) < 2:
        raise ValueError("correlation_matrix needs at least two analytes")

    data = frame[analytes].astype(float)
    values = data.corr(method="pearson", min_periods=min_rows).to_numpy()
    values = np.triu(values) + np.triu(values, k=1).T
    values = np.clip(values, -1.0, 1.0)
    np.fill_diagonal(values, 1.0)

    observed = data.notna().to_numpy().astype(np.int64)
    counts = observed.T @ observed

    return CorrelationMatrix(
        analytes=analytes,
        r=pd.DataFrame(values, index=analytes, columns=analytes),
        n=pd.DataFrame(counts, index=analytes, columns=analytes),
    )


def correlation_network(matrix: CorrelationMatrix, threshold: float = 0.3) -> pd.DataFrame:
    """Undirected edges (i, j, r) with |r| strictly above threshold, i before j."""
    long = matrix.to_long()
    edges = long[long["r"].abs() > threshold]
    return edges[["i", "j", "r"]].reset_index(drop=True)


def dissimilarity(matrix: CorrelationMatrix) -> Tuple[np.ndarray, int]:
    """
    1 - |r|, with missing pairs set to the largest observed dissimilarity.

    Returns:
        Tuple of (dissimilarity matrix, number of unordered pairs imputed)
    """
    d = 1.0 - np.abs(matrix.r.to_numpy())
    missing = ~np.isfinite(d)
    n_imputed = int(np.triu(missing, k=1).sum())
    if n_imputed:
        fill = np.nanmax(d) if np.isfinite(d).any() else 1.0
        d[missing] = fill
        logger.warning("mds_pairs_imputed", pairs=n_imputed, value=float(fill))
    np.fill_diagonal(d, 0.0)
    return d, n_imputed


@dataclass
class MdsResult:
    """Embedding coordinates with the spectrum they came from."""

    analytes: List[str]
    coords: np.ndarray
    eigenvalues: np.ndarray
    n_dims: int
    n_imputed: int = 0
    classes: Dict[str, str] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"analyte": self.analytes})
        for axis in range(self.coords.shape[1]):
            frame[AXIS_NAMES[axis] if axis < len(AXIS_NAMES) else f"dim{axis + 1}"] = self.coords[:, axis]
        frame["class"] = [self.classes.get(a, "Unclassified") for a in self.analytes]
        return frame

    def embedded_distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(axis=-1))


def mds_embed(
    distances: np.ndarray | pd.DataFrame,
    analytes: Optional[Sequence[str]] = None,
    dims: int = 2,
) -> MdsResult:
    """
    Classical multidimensional scaling.

    Double-centres B = -1/2 J D^2 J, keeps the top eigenpairs with positive eigenvalues
    and scales eigenvectors by sqrt(eigenvalue). Each axis is oriented so its first
    nonzero loading is positive. Fewer positive eigenvalues than ``dims`` leaves the
    remaining axes at zero.
    """
    if isinstance(distances, pd.DataFrame):
        analytes = list(distances.index) if analytes is None else list(analytes)
        distances = distances.to_numpy()
    D = np.asarray(distances, dtype=float)
    n = D.shape[0]
    analytes = list(analytes) if analytes is not None else [str(i) for i in range(n)]

    J = np.eye(n) - np.ones((n, n)) / n
    B = -0.5 * J @ (D**2) @ J
    B = (B + B.T) / 2.0

    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]

    top = evals.max() if n else 0.0
    positive = evals > EIGEN_RELATIVE_TOL * max(top, 0.0)
    k = int(min(dims, positive.sum()))
    if k < dims:
        logger.warning("mds_reduced_dimension", requested=dims, recovered=k)

    coords = np.zeros((n, dims))
    for axis in range(k):
        vector = evecs[:, axis]
        nonzero = np.flatnonzero(np.abs(vector) > 1e-12)
        if nonzero.size and vector[nonzero[0]] < 0:
            vector = -vector
        coords[:, axis] = vector * np.sqrt(evals[axis])

    return MdsResult(analytes=analytes, coords=coords, eigenvalues=evals, n_dims=k)


def mds_from_correlation(
    matrix: CorrelationMatrix,
    classes: Optional[Dict[str, str]] = None,
    dims: int = 2,
) -> MdsResult:
    d, n_imputed = dissimilarity(matrix)
    result = mds_embed(d, matrix.analytes, dims)
    result.n_imputed = n_imputed
    result.classes = dict(classes or {})
    return result
