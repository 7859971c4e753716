"""
Random forest schemas: hyperparameters, the search space, and trained trees.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

# Hyperparameter grids of the tuning protocol
FRACTION_RANGE = (0.8, 0.999)
NUM_TREES_RANGE = (10, 100)
MIN_NODE_SIZE_RANGE = (5, 50)


class ForestConfig(BaseModel):
    """Random forest hyperparameters."""

    model_config = ConfigDict(frozen=True)

    fraction: float = Field(0.9, gt=0.0, le=1.0, description="Per-tree subsample share")
    num_trees: int = Field(50, ge=1, description="Number of trees")
    min_node_size: int = Field(10, ge=1, description="Nodes below this row count become leaves")
    mtry: int = Field(1, ge=1, description="Candidate features per split")
    replacement: bool = Field(True, description="Subsample with replacement")
    weight_adjustment: bool = Field(
        False, description="Weight training rows by normalized sub-posterior density"
    )
    allow_wide_ranges: bool = Field(
        False, description="Permit values outside the tuning grid ranges"
    )

    @model_validator(mode="after")
    def _check_ranges(self) -> "ForestConfig":
        if self.allow_wide_ranges:
            return self
        checks = (
            ("fraction", self.fraction, FRACTION_RANGE),
            ("num_trees", self.num_trees, NUM_TREES_RANGE),
            ("min_node_size", self.min_node_size, MIN_NODE_SIZE_RANGE),
        )
        for name, value, (low, high) in checks:
            if not low <= value <= high:
                raise ValueError(
                    f"{name}={value} outside [{low}, {high}]; set allow_wide_ranges to override"
                )
        return self


class SearchSpace(BaseModel):
    """
    Grids sampled uniformly and independently by the random search.

    mtry_high=None means "the dimension of the draws".
    """

    fraction_low: float = FRACTION_RANGE[0]
    fraction_high: float = FRACTION_RANGE[1]
    fraction_step: float = 0.001
    num_trees_low: int = NUM_TREES_RANGE[0]
    num_trees_high: int = NUM_TREES_RANGE[1]
    min_node_size_low: int = MIN_NODE_SIZE_RANGE[0]
    min_node_size_high: int = MIN_NODE_SIZE_RANGE[1]
    mtry_low: int = 1
    mtry_high: Optional[int] = None
    replacement: tuple[bool, ...] = (True, False)
    weight_adjustment: tuple[bool, ...] = (True, False)

    @model_validator(mode="after")
    def _check_nonempty(self) -> "SearchSpace":
        if self.fraction_high < self.fraction_low or self.fraction_step <= 0:
            raise ValueError("empty fraction grid")
        if self.num_trees_high < self.num_trees_low:
            raise ValueError("empty num_trees grid")
        if self.min_node_size_high < self.min_node_size_low:
            raise ValueError("empty min_node_size grid")
        if self.mtry_high is not None and self.mtry_high < self.mtry_low:
            raise ValueError("empty mtry grid")
        if not self.replacement or not self.weight_adjustment:
            raise ValueError("boolean grids must not be empty")
        return self

    def sample(self, rng: np.random.Generator, dimension: int) -> ForestConfig:
        """
        Draw one configuration.

        Args:
            rng: Random generator
            dimension: Dimension d of the draws (upper end of the mtry grid)

        Returns:
            A ForestConfig on the grids
        """
        steps = int(round((self.fraction_high - self.fraction_low) / self.fraction_step))
        fraction = round(self.fraction_low + int(rng.integers(0, steps + 1)) * self.fraction_step, 6)
        mtry_high = min(self.mtry_high or dimension, dimension)
        wide = not (
            FRACTION_RANGE[0] <= self.fraction_low
            and self.fraction_high <= FRACTION_RANGE[1]
            and NUM_TREES_RANGE[0] <= self.num_trees_low
            and self.num_trees_high <= NUM_TREES_RANGE[1]
            and MIN_NODE_SIZE_RANGE[0] <= self.min_node_size_low
            and self.min_node_size_high <= MIN_NODE_SIZE_RANGE[1]
        )
        return ForestConfig(
            fraction=fraction,
            num_trees=int(rng.integers(self.num_trees_low, self.num_trees_high + 1)),
            min_node_size=int(rng.integers(self.min_node_size_low, self.min_node_size_high + 1)),
            mtry=int(rng.integers(self.mtry_low, mtry_high + 1)),
            replacement=bool(self.replacement[int(rng.integers(0, len(self.replacement)))]),
            weight_adjustment=bool(
                self.weight_adjustment[int(rng.integers(0, len(self.weight_adjustment)))]
            ),
            allow_wide_ranges=wide,
        )


@dataclass(frozen=True)
class DecisionTree:
    """
    Axis-aligned tree stored as parallel node arrays.

    Leaves have feature == -1; `value` holds each node's weighted class
    frequencies (rows sum to one). A point goes left when x[feature] <= threshold.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Leaf index reached by every point."""
        node = np.zeros(points.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            current = node[active]
            goes_left = points[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(goes_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, points: np.ndarray) -> np.ndarray:
        """Leaf class-frequency vectors for every point."""
        return self.value[self.apply(points)]


@dataclass(frozen=True)
class Forest:
    """A trained, immutable random forest over m machine labels."""

    trees: tuple
    num_classes: int
    dimension: int
    config: ForestConfig
    train_seed: int
    num_rows: int
