"""
Random forest classifier over machine labels.

Trees are grown on per-tree subsamples with weighted Gini splits over `mtry`
candidate features; a leaf stores the weighted class frequencies of its rows.
Training rows are put in a canonical (lexicographic) order first, so a forest
does not depend on the order in which the pooled draws arrive.
"""

import logging
from typing import Any, Optional

import numpy as np

from forestmerge.config import settings
from forestmerge.core.exceptions import ValidationError
from forestmerge.core.gather import parallel_map
from forestmerge.core.numerics import Stream, derive_rng, normalize_log_weights
from forestmerge.schemas.forest import DecisionTree, Forest, ForestConfig
from forestmerge.schemas.posterior import PooledDraws

logger = logging.getLogger(__name__)

FOREST_SCHEMA_VERSION = 1


def canonical_order(theta: np.ndarray) -> np.ndarray:
    """Row order sorting theta lexicographically (first column is the primary key)."""
    return np.lexsort(theta.T[::-1])


def _tree_sample(n: int, config: ForestConfig, rng: np.random.Generator) -> np.ndarray:
    size = min(max(1, int(round(config.fraction * n))), n)
    if config.replacement:
        rows = rng.integers(0, n, size=size)
    else:
        rows = rng.choice(n, size=size, replace=False)
    return np.sort(rows)


def _best_split(
    x: np.ndarray, y: np.ndarray, w: np.ndarray, features: np.ndarray, num_classes: int
) -> Optional[tuple[int, float]]:
    """
    Best (feature, threshold) by weighted Gini decrease, or None.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    total = np.bincount(y, weights=w, minlength=num_classes)
    weight = total.sum()
    baseline = np.sum(total**2) / weight
    tolerance = 1e-12 * weight
    best_gain = tolerance
    best: Optional[tuple[int, float]] = None
    k = y.size

    for f in features:
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        values = col[order]
        changes = np.flatnonzero(values[:-1] < values[1:])
        if changes.size == 0:
            continue

        weighted = np.zeros((k, num_classes))
        weighted[np.arange(k), y[order]] = w[order]
        left = np.cumsum(weighted, axis=0)[changes]
        right = total - left
        w_left = left.sum(axis=1)
        w_right = weight - w_left
        score = np.sum(left**2, axis=1) / w_left + np.sum(right**2, axis=1) / w_right
        gains = score - baseline

        pos = int(np.argmax(gains))
        if gains[pos] > best_gain:
            i = changes[pos]
            threshold = 0.5 * (values[i] + values[i + 1])
            if threshold >= values[i + 1]:
                threshold = values[i]
            best_gain = gains[pos]
            best = (int(f), float(threshold))
    return best


def _grow_tree(
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    num_classes: int,
    config: ForestConfig,
    rng: np.random.Generator,
) -> DecisionTree:
    """Grow one tree on a fresh subsample drawn from rng."""
    rows = _tree_sample(x.shape[0], config, rng)
    d = x.shape[1]
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[np.ndarray] = []

    def new_node(idx: np.ndarray) -> int:
        counts = np.bincount(y[idx], weights=w[idx], minlength=num_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts / counts.sum())
        return len(feature) - 1

    stack = [(new_node(rows), rows)]
    while stack:
        node, idx = stack.pop()
        if idx.size < config.min_node_size or np.count_nonzero(value[node]) <= 1:
            continue
        candidates = np.sort(rng.choice(d, size=config.mtry, replace=False))
        split = _best_split(x[idx], y[idx], w[idx], candidates, num_classes)
        if split is None:
            continue
        f, cut = split
        goes_left = x[idx, f] <= cut
        left_idx, right_idx = idx[goes_left], idx[~goes_left]
        feature[node], threshold[node] = f, cut
        left[node], right[node] = new_node(left_idx), new_node(right_idx)
        stack.append((right[node], right_idx))
        stack.append((left[node], left_idx))

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.vstack(value),
    )


def train_forest(
    pooled: PooledDraws,
    config: ForestConfig,
    case_weights: Optional[np.ndarray] = None,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> Forest:
    """
    Train a random forest predicting the machine label of each pooled draw.

    Args:
        pooled: Pooled draws (features theta, labels machine)
        config: Hyperparameters
        case_weights: Optional per-draw weights; with weight_adjustment and no
            weights given, the normalized sub-posterior density weights are used
        seed: Training seed; tree t draws from the stream (seed, TREE, t)
        n_jobs: Worker count for tree training

    Returns:
        The trained Forest

    Raises:
        ValidationError: On a single machine label, mtry > d or bad case weights
    """
    if np.unique(pooled.machine).size < 2:
        raise ValidationError("degenerate labels: need at least two machines")
    if config.mtry > pooled.dimension:
        raise ValidationError(f"mtry={config.mtry} exceeds dimension {pooled.dimension}")

    if case_weights is None and config.weight_adjustment:
        case_weights = normalize_log_weights(pooled.log_density)
    if case_weights is None:
        weights = np.ones(pooled.size)
    else:
        weights = np.asarray(case_weights, dtype=np.float64).ravel()
        if weights.shape != (pooled.size,):
            raise ValidationError(
                f"case_weights has length {weights.size}, pool has {pooled.size} draws"
            )
        if not np.all(np.isfinite(weights)) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValidationError("case_weights must be finite, nonnegative and not all zero")
        weights = weights * (pooled.size / weights.sum())
        weights = np.maximum(weights, 1e-12 * weights.max())

    order = canonical_order(pooled.theta)
    x = pooled.theta[order]
    y = pooled.machine[order] - 1
    w = weights[order]
    num_classes = int(pooled.machine.max())

    trees = parallel_map(
        lambda t: _grow_tree(x, y, w, num_classes, config, derive_rng(seed, Stream.TREE, t)),
        range(config.num_trees),
        n_jobs=n_jobs,
    )
    logger.debug(
        f"Trained {config.num_trees} trees on {pooled.size} draws "
        f"(mean {np.mean([t.node_count for t in trees]):.0f} nodes)"
    )
    return Forest(
        trees=tuple(trees),
        num_classes=num_classes,
        dimension=pooled.dimension,
        config=config,
        train_seed=seed,
        num_rows=pooled.size,
    )


def _check_points(forest: Forest, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None] if forest.dimension == 1 else points[None, :]
    if points.ndim != 2 or points.shape[1] != forest.dimension:
        raise ValidationError(
            f"dimension mismatch: forest expects {forest.dimension} columns, got {points.shape}"
        )
    return points


def average_tree_proba(forest: Forest, points: np.ndarray) -> np.ndarray:
    """Mean of the leaf frequency vectors across trees, before flooring."""
    points = _check_points(forest, points)
    total = np.zeros((points.shape[0], forest.num_classes))
    for tree in forest.trees:
        total += tree.predict(points)
    return total / len(forest.trees)


def floor_probabilities(probs: np.ndarray, floor: Optional[float] = None) -> np.ndarray:
    """
    Lift every entry to at least `floor` while keeping rows on the simplex.

    Mixes each row with the uniform vector: p -> (1 - m * floor) p + floor.
    This departs from clamping to [floor, 1] and renormalizing: the mix also
    shrinks entries that were already above the floor, but a clamped entry
    can fall back below the floor once its row is renormalized, and the mix
    never does. Entries equal to zero land exactly on the floor and a row
    already uniform is unchanged.

    Args:
        probs: Rows on the probability simplex
        floor: Lower bound, below 1 / m (defaults to settings.PROBABILITY_FLOOR)
    """
    floor = settings.PROBABILITY_FLOOR if floor is None else floor
    m = probs.shape[1]
    return (1.0 - m * floor) * probs + floor


def predict_proba(forest: Forest, points: np.ndarray, floor: Optional[float] = None) -> np.ndarray:
    """
    Class-probability matrix Pr(z = j | theta) for each point.

    Args:
        forest: Trained forest
        points: P x d matrix
        floor: Probability floor (defaults to settings.PROBABILITY_FLOOR)

    Returns:
        P x m matrix; rows sum to one and every entry is at least `floor`

    Raises:
        ValidationError: On a dimension mismatch
    """
    return floor_probabilities(average_tree_proba(forest, points), floor)


def inbag_rows(forest: Forest, tree_id: int) -> np.ndarray:
    """Canonical-order row indices tree `tree_id` was trained on (with repeats)."""
    rng = derive_rng(forest.train_seed, Stream.TREE, tree_id)
    return _tree_sample(forest.num_rows, forest.config, rng)


def out_of_bag_accuracy(forest: Forest, pooled: PooledDraws) -> float:
    """
    Share of out-of-bag draws whose most probable class is their own machine.

    Args:
        forest: Forest trained on `pooled`
        pooled: The training pool

    Returns:
        Accuracy in [0, 1] over draws left out by at least one tree

    Raises:
        ValidationError: If the pool does not match or no draw is out of bag
    """
    if pooled.size != forest.num_rows:
        raise ValidationError("pool does not match the forest's training pool")
    order = canonical_order(pooled.theta)
    x = pooled.theta[order]
    y = pooled.machine[order] - 1

    votes = np.zeros((pooled.size, forest.num_classes))
    covered = np.zeros(pooled.size, dtype=bool)
    for t, tree in enumerate(forest.trees):
        oob = np.ones(pooled.size, dtype=bool)
        oob[inbag_rows(forest, t)] = False
        if oob.any():
            votes[oob] += tree.predict(x[oob])
            covered |= oob
    if not covered.any():
        raise ValidationError("no out-of-bag rows: use replacement or fraction < 1")
    correct = np.argmax(votes[covered], axis=1) == y[covered]
    return float(np.mean(correct))


def forest_to_dict(forest: Forest) -> dict[str, Any]:
    """Self-contained JSON-ready description of a forest."""
    return {
        "schema_version": FOREST_SCHEMA_VERSION,
        "num_classes": forest.num_classes,
        "dimension": forest.dimension,
        "train_seed": forest.train_seed,
        "num_rows": forest.num_rows,
        "config": forest.config.model_dump(),
        "trees": [
            {
                "feature": tree.feature.tolist(),
                "threshold": tree.threshold.tolist(),
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "value": tree.value.tolist(),
            }
            for tree in forest.trees
        ],
    }


def forest_from_dict(payload: dict[str, Any]) -> Forest:
    """
    Rebuild a forest from forest_to_dict output.

    Raises:
        ValidationError: On an unsupported schema version or a missing field
    """
    version = payload.get("schema_version")
    if version != FOREST_SCHEMA_VERSION:
        raise ValidationError(f"schema_version: unsupported forest format {version!r}")
    try:
        trees = tuple(
            DecisionTree(
                feature=np.asarray(t["feature"], dtype=np.int64),
                threshold=np.asarray(t["threshold"], dtype=np.float64),
                left=np.asarray(t["left"], dtype=np.int64),
                right=np.asarray(t["right"], dtype=np.int64),
                value=np.asarray(t["value"], dtype=np.float64),
            )
            for t in payload["trees"]
        )
        return Forest(
            trees=trees,
            num_classes=int(payload["num_classes"]),
            dimension=int(payload["dimension"]),
            config=ForestConfig(**payload["config"]),
            train_seed=int(payload["train_seed"]),
            num_rows=int(payload["num_rows"]),
        )
    except KeyError as e:
        raise ValidationError(f"{e.args[0]}: missing from forest document") from e
