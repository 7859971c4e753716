"""
Unit tests for the artifact store.
"""

import json

import numpy as np
import pytest

from forestmerge.core.exceptions import ValidationError
from forestmerge.schemas.combine import CombineMethod, CombineResult
from forestmerge.schemas.forest import ForestConfig, SearchSpace
from forestmerge.schemas.posterior import Dataset, Partition
from forestmerge.services.criterion_service import random_search
from forestmerge.services.forest_service import predict_proba, train_forest


@pytest.mark.storage
@pytest.mark.unit
class TestArtifactStoreHappyPath:
    """Happy path tests for reading and writing artifacts."""

    def test_pooled_draws_survive_exactly(self, store, small_pool):
        """Test pooled draws survive exactly."""
        path = store.write_pooled(small_pool)
        restored = store.read_pooled(path)
        np.testing.assert_array_equal(restored.theta, small_pool.theta)
        np.testing.assert_array_equal(restored.machine, small_pool.machine)
        np.testing.assert_array_equal(restored.log_density, small_pool.log_density)

    def test_pooled_header(self, store, small_pool):
        """Test pooled header."""
        header = store.write_pooled(small_pool).read_text().splitlines()[0]
        assert header == "machine,iter,theta_1,theta_2,log_density"

    def test_shuffled_pooled_rows_are_reordered(self, store, small_pool, tmp_path):
        """Test shuffled pooled rows are reordered."""
        path = store.write_pooled(small_pool)
        lines = path.read_text().splitlines()
        shuffled = tmp_path / "shuffled.csv"
        shuffled.write_text("\n".join([lines[0], *reversed(lines[1:])]) + "\n")
        restored = store.read_pooled(shuffled)
        np.testing.assert_array_equal(restored.theta, small_pool.theta)

    def test_dataset_with_labels(self, store, rng):
        """Test dataset with labels."""
        dataset = Dataset(rows=rng.standard_normal((6, 1)), labels=np.array([1, 2, 3, 1, 2, 3]))
        restored = store.read_dataset(store.write_dataset(dataset))
        np.testing.assert_array_equal(restored.rows, dataset.rows)
        np.testing.assert_array_equal(restored.labels, dataset.labels)

    def test_dataset_without_labels(self, store, rng):
        """Test dataset without labels."""
        dataset = Dataset(rows=rng.standard_normal((4, 3)))
        restored = store.read_dataset(store.write_dataset(dataset))
        assert restored.labels is None
        assert restored.width == 3

    def test_partition(self, store):
        """Test writing and reading a partition."""
        partition = Partition(index_sets=(np.array([0, 3]), np.array([1, 2])))
        restored = store.read_partition(store.write_partition(partition, n=4))
        assert restored.m == 2
        np.testing.assert_array_equal(restored.index_sets[1], [1, 2])

    def test_trace_and_forest(self, store, small_pool, rng):
        """Test trace and forest."""
        space = SearchSpace(num_trees_low=10, num_trees_high=12)
        trace, forest = random_search(small_pool, space, budget=2, seed=1)
        restored_trace = store.read_trace(store.write_trace(trace))
        assert restored_trace.best_index == trace.best_index
        assert restored_trace.best.seed == trace.best.seed
        restored_forest = store.read_forest(store.write_forest(forest))
        points = rng.standard_normal((10, 2))
        np.testing.assert_array_equal(
            predict_proba(restored_forest, points), predict_proba(forest, points)
        )

    def test_combine_sidecar(self, store, rng):
        """Test combine sidecar."""
        result = CombineResult(
            draws=rng.standard_normal((5, 2)),
            method=CombineMethod.CONSENSUS,
            seed=9,
            config_snapshot={"m": 3},
            seconds=0.5,
        )
        path = store.write_combine(result)
        assert path.name == "consensus.csv"
        np.testing.assert_array_equal(store.read_draws(path), result.draws)
        sidecar = json.loads(store.path("consensus.json").read_text())
        assert sidecar == {"method": "consensus", "seed": 9, "config": {"m": 3}, "seconds": 0.5}

    def test_forest_document_is_stable(self, store, small_pool):
        """Test forest document is stable."""
        forest = train_forest(small_pool, ForestConfig(num_trees=10), seed=2)
        first = store.write_forest(forest, "a.json").read_bytes()
        second = store.write_forest(forest, "b.json").read_bytes()
        assert first == second


@pytest.mark.storage
@pytest.mark.unit
class TestArtifactStoreSadPath:
    """Sad path tests naming the offending column or file."""

    def test_missing_file(self, store, tmp_path):
        """Test missing file."""
        with pytest.raises(ValidationError, match="file not found"):
            store.read_pooled(tmp_path / "absent.csv")

    def test_missing_column(self, store, tmp_path):
        """Test missing column."""
        path = tmp_path / "pooled.csv"
        path.write_text("machine,iter,theta_1\n1,1,0.5\n")
        with pytest.raises(ValidationError, match="log_density"):
            store.read_pooled(path)

    def test_missing_theta_columns(self, store, tmp_path):
        """Test missing theta columns."""
        path = tmp_path / "pooled.csv"
        path.write_text("machine,iter,log_density\n1,1,0.5\n")
        with pytest.raises(ValidationError, match="theta_1"):
            store.read_pooled(path)

    def test_non_numeric_value(self, store, tmp_path):
        """Test non numeric value."""
        path = tmp_path / "draws.csv"
        path.write_text("iter,theta_1\n1,abc\n2,0.1\n")
        with pytest.raises(ValidationError, match="theta_1: non-numeric"):
            store.read_draws(path)

    def test_partition_labels_start_at_one(self, store, tmp_path):
        """Test partition labels start at one."""
        path = tmp_path / "partition.csv"
        path.write_text("row,machine\n0,0\n1,1\n")
        with pytest.raises(ValidationError, match="machine"):
            store.read_partition(path)

    def test_malformed_json(self, store, tmp_path):
        """Test malformed json."""
        path = tmp_path / "forest.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError, match="malformed JSON"):
            store.read_forest(path)

    def test_missing_forest_field(self, store, small_pool, tmp_path):
        """Test missing forest field."""
        forest = train_forest(small_pool, ForestConfig(num_trees=10), seed=2)
        payload = json.loads(store.write_forest(forest).read_text())
        del payload["trees"]
        path = tmp_path / "broken.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(ValidationError, match="trees"):
            store.read_forest(path)
