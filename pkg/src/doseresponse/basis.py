"""
Clamped B-spline bases with quantile knots and their difference penalty.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline


@dataclass
class BSplineBasis:
    """Clamped B-spline basis on [lower, upper].

    Values outside the boundary knots are evaluated at the nearest boundary.
    """

    knots: np.ndarray
    degree: int = 3

    @classmethod
    def from_data(cls, x: Sequence[float], n_interior: int = 20, degree: int = 3) -> "BSplineBasis":
        """
        Interior knots at equally spaced quantiles j/(k+1) of x, boundary knots
        repeated degree + 1 times at min(x) and max(x).

        Raises:
            ValueError: On fewer than two distinct finite values or k < 1
        """
        x = np.asarray(x, dtype=float)
        x = x[np.isfinite(x)]
        if n_interior < 1:
            raise ValueError("At least one interior knot is required")
        if x.size < 2 or x.min() == x.max():
            raise ValueError("Exposure values are degenerate; cannot build a spline basis")

        lower, upper = float(x.min()), float(x.max())
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.unique(np.quantile(x, probs))
        interior = interior[(interior > lower) & (interior < upper)]

        knots = np.concatenate(
            [np.repeat(lower, degree + 1), interior, np.repeat(upper, degree + 1)]
        )
        return cls(knots=knots, degree=degree)

    @property
    def lower(self) -> float:
        return float(self.knots[0])

    @property
    def upper(self) -> float:
        return float(self.knots[-1])

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    def clamp(self, x: Sequence[float]) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def design(self, x: Sequence[float]) -> np.ndarray:
        """(n, n_basis) basis matrix; rows sum to one."""
        matrix = BSpline.design_matrix(self.clamp(x), self.knots, self.degree)
        return matrix.toarray()

    def derivative_design(self, x: Sequence[float], order: int = 1) -> np.ndarray:
        """(n, n_basis) matrix of basis derivatives."""
        spline = BSpline(self.knots, np.eye(self.n_basis), self.degree)
        return spline.derivative(order)(self.clamp(x))

    def greville(self) -> np.ndarray:
        """Knot averages at which the coefficients of an affine function lie on a line."""
        k = self.degree
        return np.array([self.knots[j + 1 : j + k + 1].mean() for j in range(self.n_basis)])

    def shifted(self, delta: float) -> "BSplineBasis":
        return BSplineBasis(knots=self.knots + delta, degree=self.degree)


def bspline_basis(x: Sequence[float], k: int, degree: int = 3) -> np.ndarray:
    """Basis matrix for x with k quantile interior knots."""
    return BSplineBasis.from_data(x, n_interior=k, degree=degree).design(x)


def difference_penalty(basis: BSplineBasis, order: int = 2) -> np.ndarray:
    """
    Divided-difference matrix on the Greville abscissae.

    Its null space is the coefficient vectors of polynomials of degree < order, so a
    second-order penalty leaves exactly the affine functions unpenalized. Rows are
    rescaled by the mean abscissa spacing to match ordinary differences on an equally
    spaced grid.
    """
    g = basis.greville()
    n = basis.n_basis
    if n <= order:
        return np.zeros((0, n))

    D = np.eye(n)
    for level in range(1, order + 1):
        spacing = g[level:] - g[:-level]
        D = (D[1:] - D[:-1]) / spacing[:, None]

    mean_spacing = (g[-1] - g[0]) / (n - 1)
    factorial = float(np.prod(np.arange(1, order + 1)))
    return D * factorial * mean_spacing**order
