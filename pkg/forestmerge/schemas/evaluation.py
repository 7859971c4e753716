"""
Evaluation data types: moment summaries and 1-d density traces.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid


@dataclass(frozen=True)
class MomentSummary:
    """Mean vector and covariance matrix of a draw set."""

    mean: np.ndarray
    covariance: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True)
class DensityTrace:
    """Density evaluated on a strictly increasing grid."""

    grid: np.ndarray
    density: np.ndarray

    def integral(self) -> float:
        """Trapezoid integral of the density over the grid."""
        return float(trapezoid(self.density, self.grid))
