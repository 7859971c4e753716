"""
Deterministic numerical primitives shared by every service.

All density bookkeeping happens in log space; weights leave this module
normalized. Random state is always passed in as a ``numpy.random.Generator``.
"""

import enum
import logging

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp

from forestmerge.core.exceptions import ValidationError
from forestmerge.schemas.evaluation import MomentSummary

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

SIMPLEX_TOLERANCE = 1e-12


class Stream(enum.IntEnum):
    """Independent random streams hanging off one master seed."""

    DATA = 0
    PARTITION = 1
    SAMPLE = 2
    TUNE = 3
    COMBINE = 4
    REFERENCE = 5
    TREE = 6
    JITTER = 7
    HOLDOUT = 8


def derive_rng(seed: int, stream: int, *ids: int) -> np.random.Generator:
    """
    Build a generator for one task from the master seed.

    Args:
        seed: Master seed
        stream: Stream identifier (see Stream)
        ids: Task identifiers (machine id, trial id, tree id, ...)

    Returns:
        A generator whose state depends only on (seed, stream, ids)
    """
    entropy = [int(seed), int(stream), *(int(i) for i in ids)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _as_log_weights(values: npt.ArrayLike) -> FloatArray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError("empty vector")
    if not np.all(np.isfinite(v)):
        raise ValidationError("non-finite weight")
    return v


def log_sum_exp(values: npt.ArrayLike) -> float:
    """
    Stable log(sum(exp(v))).

    Args:
        values: Log-weights, finite, at least one entry

    Returns:
        The log of the sum of exponentials

    Raises:
        ValidationError: If the vector is empty or holds a non-finite entry
    """
    v = _as_log_weights(values)
    return float(logsumexp(v))


def normalize_log_weights(values: npt.ArrayLike) -> FloatArray:
    """
    Turn log-weights into simplex weights.

    Args:
        values: Log-weights, finite, at least one entry

    Returns:
        Nonnegative weights summing to one

    Raises:
        ValidationError: As log_sum_exp
    """
    v = _as_log_weights(values)
    w = np.exp(v - logsumexp(v))
    return w / w.sum()


def _as_simplex(weights: npt.ArrayLike) -> FloatArray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValidationError("empty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValidationError("degenerate weights: sum is zero")
    return w / total


def weighted_moments(draws: npt.ArrayLike, weights: npt.ArrayLike) -> MomentSummary:
    """
    Weighted mean and population covariance.

    Args:
        draws: M x d matrix (a 1-d vector is read as M x 1)
        weights: Length-M nonnegative weights, normalized here

    Returns:
        MomentSummary with mean and covariance

    Raises:
        ValidationError: On length mismatch, M < 2 or all-zero weights
    """
    x = np.asarray(draws, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError("draws must be an M x d matrix")
    if x.shape[0] < 2:
        raise ValidationError("need at least two draws")
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != x.shape[0]:
        raise ValidationError(
            f"weight length {w.size} does not match draw count {x.shape[0]}"
        )
    w = _as_simplex(w)

    mean = w @ x
    centered = x - mean
    covariance = (centered * w[:, None]).T @ centered
    covariance = 0.5 * (covariance + covariance.T)
    return MomentSummary(mean=mean, covariance=covariance)


def sample_moments(draws: npt.ArrayLike) -> MomentSummary:
    """Unweighted moments of a draw matrix (population covariance)."""
    x = np.asarray(draws, dtype=np.float64)
    n = x.shape[0]
    return weighted_moments(x, np.full(n, 1.0 / max(n, 1)))


def resample_indices(
    weights: npt.ArrayLike, count: int, rng: np.random.Generator
) -> IntArray:
    """
    Systematic resampling.

    One uniform offset places `count` evenly spaced pointers on the cumulative
    weights; the selected indices are then shuffled so the output order carries
    no information about pool order.

    Args:
        weights: Nonnegative weights (normalized here)
        count: Number of indices to draw, at least one
        rng: Random generator

    Returns:
        Integer index vector of length `count`

    Raises:
        ValidationError: If count < 1 or the weights sum to zero
    """
    if count < 1:
        raise ValidationError("count must be at least 1")
    w = _as_simplex(weights)

    cumulative = np.cumsum(w)
    cumulative /= cumulative[-1]
    positions = (rng.uniform() + np.arange(count)) / count
    indices = np.searchsorted(cumulative, positions, side="right")
    indices = np.minimum(indices, w.size - 1)
    return rng.permutation(indices).astype(np.int64)


def effective_sample_size(weights: npt.ArrayLike) -> float:
    """
    Kish effective sample size 1 / sum(w^2) of normalized weights.

    Args:
        weights: Nonnegative weights (normalized here)

    Returns:
        A value in [1, len(weights)]
    """
    w = _as_simplex(weights)
    return float(1.0 / np.sum(w**2))
