"""
Evaluation metrics: moment-based Gaussian KL, Pearson correlation,
one-dimensional density traces and mode detection.
"""

import logging
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.signal import find_peaks
from scipy.stats import norm

from forestmerge.config import settings
from forestmerge.core.exceptions import NumericalError, ValidationError
from forestmerge.core.numerics import FloatArray
from forestmerge.schemas.evaluation import DensityTrace, MomentSummary

logger = logging.getLogger(__name__)

MIN_TRACE_DRAWS = 10


def _factor(covariance: np.ndarray, which: str) -> tuple:
    try:
        return cho_factor(covariance)
    except LinAlgError as e:
        raise NumericalError(f"{which} covariance not SPD") from e


def gaussian_kl(full: MomentSummary, approx: MomentSummary) -> float:
    """
    KL(full || approx) between the normal distributions with the given moments.

    0.5 [tr(S_a^-1 S_f) + (mu_a - mu_f)' S_a^-1 (mu_a - mu_f) - d + log(|S_a| / |S_f|)]

    Raises:
        ValidationError: On a dimension mismatch
        NumericalError: If either covariance is not SPD
    """
    if full.dimension != approx.dimension:
        raise ValidationError(
            f"dimension mismatch: {full.dimension} vs {approx.dimension}"
        )
    d = full.dimension
    approx_factor = _factor(approx.covariance, "approximate")
    full_factor = _factor(full.covariance, "full")

    trace_term = float(np.trace(cho_solve(approx_factor, full.covariance)))
    delta = approx.mean - full.mean
    quad_term = float(delta @ cho_solve(approx_factor, delta))
    log_det_approx = 2.0 * np.sum(np.log(np.diag(approx_factor[0])))
    log_det_full = 2.0 * np.sum(np.log(np.diag(full_factor[0])))
    return 0.5 * (trace_term + quad_term - d + log_det_approx - log_det_full)


def pearson_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """
    Pearson correlation coefficient.

    Raises:
        ValidationError: On unequal lengths, fewer than three pairs or zero variance
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValidationError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValidationError("correlation needs at least three pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValidationError("zero variance: correlation undefined")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def default_grid(draws: np.ndarray, bandwidth: float, points: Optional[int] = None) -> FloatArray:
    """Evenly spaced grid over the draw range widened by three bandwidths."""
    points = points or settings.TRACE_GRID_POINTS
    return np.linspace(draws.min() - 3 * bandwidth, draws.max() + 3 * bandwidth, points)


def density_trace(
    draws: np.ndarray,
    bandwidth: float,
    grid: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
) -> DensityTrace:
    """
    Gaussian-kernel density estimate of one-dimensional draws on a grid.

    Args:
        draws: Vector (or single-column matrix) of at least ten draws
        bandwidth: Kernel standard deviation
        grid: Strictly increasing evaluation points (default: see default_grid)
        weights: Optional nonnegative draw weights (default uniform)

    Returns:
        DensityTrace

    Raises:
        ValidationError: On bandwidth <= 0, too few draws, multi-column draws or a bad grid
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 2 and draws.shape[1] == 1:
        draws = draws[:, 0]
    if draws.ndim != 1:
        raise ValidationError("density traces need one-dimensional draws")
    if bandwidth <= 0:
        raise ValidationError("bandwidth must be positive")
    if draws.size < MIN_TRACE_DRAWS:
        raise ValidationError(f"density trace needs at least {MIN_TRACE_DRAWS} draws")

    if weights is None:
        w = np.full(draws.size, 1.0 / draws.size)
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.size != draws.size or np.any(w < 0) or w.sum() <= 0:
            raise ValidationError("weights must be nonnegative, one per draw, not all zero")
        w = w / w.sum()

    grid = default_grid(draws, bandwidth) if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValidationError("grid must be strictly increasing")

    kernel = norm.pdf(grid[:, None], loc=draws[None, :], scale=bandwidth)
    return DensityTrace(grid=grid, density=kernel @ w)


def find_modes(trace: DensityTrace, prominence: Optional[float] = None) -> FloatArray:
    """
    Grid locations of interior local maxima higher than prominence x global max.

    Raises:
        ValidationError: If prominence <= 0
    """
    prominence = settings.MODE_PROMINENCE if prominence is None else prominence
    if prominence <= 0:
        raise ValidationError("prominence must be positive")
    peaks, _ = find_peaks(trace.density, height=prominence * float(np.max(trace.density)))
    return trace.grid[peaks]


def count_modes(trace: DensityTrace, prominence: Optional[float] = None) -> int:
    """Number of interior modes above the prominence threshold (boundaries excluded)."""
    return int(find_modes(trace, prominence).size)
