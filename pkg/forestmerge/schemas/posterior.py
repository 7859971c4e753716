"""
Data, partition and posterior types exchanged by the sampling stage.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from forestmerge.core.exceptions import ValidationError

# Component weights of the three-mode mixture scenario
MIXTURE_WEIGHTS = np.array([0.25, 0.5, 0.25])
MIXTURE_MEANS = np.array([-3.0, 0.0, 3.0])


@dataclass(frozen=True)
class Dataset:
    """
    n x b data matrix, optionally with per-row component labels in {1, 2, 3}.
    """

    rows: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.rows.ndim != 2:
            raise ValidationError("dataset rows must be a matrix")
        if not np.all(np.isfinite(self.rows)):
            raise ValidationError("dataset contains non-finite values")
        if self.labels is not None and self.labels.shape[0] != self.rows.shape[0]:
            raise ValidationError("label count does not match row count")

    @property
    def n(self) -> int:
        return int(self.rows.shape[0])

    @property
    def width(self) -> int:
        return int(self.rows.shape[1])

    def subset(self, index: np.ndarray) -> "Dataset":
        """Rows (and labels) at the given 0-based indices."""
        labels = None if self.labels is None else self.labels[index]
        return Dataset(rows=self.rows[index], labels=labels)


@dataclass(frozen=True)
class Partition:
    """
    m disjoint 0-based row-index sets covering range(n).
    """

    index_sets: tuple

    @property
    def m(self) -> int:
        return len(self.index_sets)

    @property
    def sizes(self) -> list[int]:
        return [int(len(s)) for s in self.index_sets]

    def machine_of_rows(self, n: int) -> np.ndarray:
        """Machine label (1-based) of every row."""
        machine = np.zeros(n, dtype=np.int64)
        for i, rows in enumerate(self.index_sets, start=1):
            machine[rows] = i
        return machine


@dataclass(frozen=True)
class GaussianPosterior:
    """Multivariate normal posterior N(mean, covariance)."""

    mean: np.ndarray
    covariance: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True)
class MixturePosterior:
    """
    Univariate three-component normal mixture with fixed weights.
    """

    component_means: np.ndarray
    component_variances: np.ndarray
    component_weights: np.ndarray = field(default_factory=lambda: MIXTURE_WEIGHTS.copy())

    def __post_init__(self) -> None:
        if np.any(self.component_variances <= 0):
            raise ValidationError("mixture variances must be positive")
        if abs(float(np.sum(self.component_weights)) - 1.0) > 1e-12:
            raise ValidationError("mixture weights must sum to 1")


class SubposteriorSample(NamedTuple):
    """Draws from one sub-posterior with their log densities."""

    draws: np.ndarray
    log_densities: np.ndarray


class MetropolisResult(NamedTuple):
    """Retained Metropolis draws, their log targets and the acceptance rate."""

    draws: np.ndarray
    log_densities: np.ndarray
    acceptance_rate: float


@dataclass(frozen=True)
class PooledDraws:
    """
    The mN x d matrix of sub-posterior draws gathered at the one-shot reduce.

    Row k = (i - 1) N + t holds machine i's draw t (both 1-based).
    """

    theta: np.ndarray
    machine: np.ndarray
    log_density: np.ndarray

    def __post_init__(self) -> None:
        if self.theta.ndim != 2:
            raise ValidationError("pooled theta must be a matrix")
        size = self.theta.shape[0]
        if self.machine.shape != (size,) or self.log_density.shape != (size,):
            raise ValidationError("pooled columns have inconsistent lengths")
        if not np.all(np.isfinite(self.log_density)):
            raise ValidationError("non-finite log density in pooled draws")
        if not np.all(np.isfinite(self.theta)):
            raise ValidationError("non-finite draw in pooled draws")
        labels, counts = np.unique(self.machine, return_counts=True)
        if labels.size and (labels[0] != 1 or labels[-1] != labels.size):
            raise ValidationError("machine labels must be 1..m")
        if counts.size and np.any(counts != counts[0]):
            raise ValidationError("each machine must contribute the same number of draws")

    @property
    def size(self) -> int:
        return int(self.theta.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.theta.shape[1])

    @property
    def m(self) -> int:
        return int(np.unique(self.machine).size)

    @property
    def draws_per_machine(self) -> int:
        return self.size // max(self.m, 1)

    def iteration(self) -> np.ndarray:
        """1-based within-machine draw index t of every row."""
        n = self.draws_per_machine
        return np.tile(np.arange(1, n + 1), self.m)

    def per_machine(self) -> list[np.ndarray]:
        """Draw matrices split by machine, in machine order."""
        return [self.theta[self.machine == i] for i in range(1, self.m + 1)]

    def per_machine_log_density(self) -> list[np.ndarray]:
        return [self.log_density[self.machine == i] for i in range(1, self.m + 1)]

    def take(self, index: np.ndarray) -> "PooledDraws":
        """Rows at `index` (must keep equal per-machine counts)."""
        index = np.asarray(index, dtype=np.int64)
        return PooledDraws(
            theta=self.theta[index],
            machine=self.machine[index],
            log_density=self.log_density[index],
        )
