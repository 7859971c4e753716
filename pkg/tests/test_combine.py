"""
Unit tests for the combiners.
"""

from unittest.mock import patch

import numpy as np
import pytest

from forestmerge.core.exceptions import NumericalError, ValidationError
from forestmerge.schemas.combine import CombineMethod, JitterConfig, JitterKind
from forestmerge.schemas.forest import DecisionTree, Forest, ForestConfig
from forestmerge.services.combine_service import (
    combine_classifier,
    combine_consensus,
    combine_kde_product,
    combine_weierstrass,
    default_bandwidth,
    jitter_augment,
    kernel_shape,
    tune_bandwidth,
    tuple_log_weights,
)
from forestmerge.services.forest_service import train_forest

NO_JITTER = JitterConfig(kind=JitterKind.NONE)


def _uniform_forest(m: int, d: int) -> Forest:
    """A one-leaf forest predicting the uniform vector everywhere."""
    leaf = DecisionTree(
        feature=np.array([-1]),
        threshold=np.array([0.0]),
        left=np.array([-1]),
        right=np.array([-1]),
        value=np.full((1, m), 1.0 / m),
    )
    return Forest(
        trees=(leaf,),
        num_classes=m,
        dimension=d,
        config=ForestConfig(),
        train_seed=0,
        num_rows=0,
    )


class _RejectingGenerator:
    """Generator whose uniform draws are all one, so no tie is ever accepted."""

    def __init__(self):
        self._rng = np.random.default_rng(0)

    def integers(self, *args, **kwargs):
        return self._rng.integers(*args, **kwargs)

    def uniform(self, size=None):
        return np.ones(size)

    def standard_normal(self, size=None):
        return self._rng.standard_normal(size)


@pytest.mark.combine
@pytest.mark.unit
class TestJitter:
    """Tests for candidate pool augmentation."""

    def test_layout_and_source(self, small_pool, rng):
        """Test candidate layout and source machine columns."""
        jc = JitterConfig(copies_per_draw=2)
        candidates = jitter_augment(small_pool, jc, rng)
        assert candidates.theta.shape == (3 * small_pool.size, 2)
        np.testing.assert_array_equal(candidates.theta[: small_pool.size], small_pool.theta)
        np.testing.assert_array_equal(candidates.source, np.tile(np.arange(small_pool.size), 3))

    def test_multiplicative_ratios_in_range(self, small_pool, rng):
        """Test multiplicative ratios in range."""
        candidates = jitter_augment(small_pool, JitterConfig(), rng)
        ratio = candidates.theta[small_pool.size :] / small_pool.theta
        assert np.all(ratio >= 1.0 / 3.0 - 1e-12)
        assert np.all(ratio <= 3.0 + 1e-12)

    def test_additive_noise_scale(self, pool_factory, rng):
        """Test additive noise scale."""
        pooled = pool_factory(m=2, N=2000, d=1, separation=0.0)
        jc = JitterConfig(kind=JitterKind.ADDITIVE_GAUSSIAN, additive_scale=0.5)
        candidates = jitter_augment(pooled, jc, rng)
        noise = candidates.theta[pooled.size :] - pooled.theta
        assert np.std(noise) == pytest.approx(0.5 * np.std(pooled.theta), rel=0.1)

    def test_none_returns_originals(self, small_pool, rng):
        """Test none returns originals."""
        candidates = jitter_augment(small_pool, NO_JITTER, rng)
        np.testing.assert_array_equal(candidates.theta, small_pool.theta)

    def test_bad_multiplicative_range(self):
        """Test bad multiplicative range."""
        with pytest.raises(ValueError):
            JitterConfig(low=2.0, high=1.0)


@pytest.mark.combine
@pytest.mark.unit
class TestClassifierCombiner:
    """Tests for the forest-based resampler."""

    def test_without_jitter_draws_stay_in_pool(self, small_pool):
        """Test without jitter draws stay in pool."""
        forest = train_forest(small_pool, ForestConfig(num_trees=10), seed=1)
        result = combine_classifier(small_pool, forest, NO_JITTER, M=200, seed=3)
        assert result.draws.shape == (200, 2)
        assert result.method == CombineMethod.CLASSIFIER
        pool_rows = {tuple(row) for row in small_pool.theta}
        assert all(tuple(row) in pool_rows for row in result.draws)

    def test_uniform_forest_gives_uniform_weights(self, small_pool):
        """Test uniform forest gives uniform weights."""
        result = combine_classifier(
            small_pool, _uniform_forest(3, 2), JitterConfig(), M=50, seed=0
        )
        np.testing.assert_allclose(result.weights_used, 1.0 / (2 * small_pool.size))

    def test_deterministic_given_seed(self, small_pool):
        """Test deterministic given seed."""
        forest = train_forest(small_pool, ForestConfig(num_trees=10), seed=1)
        a = combine_classifier(small_pool, forest, JitterConfig(), M=100, seed=7)
        b = combine_classifier(small_pool, forest, JitterConfig(), M=100, seed=7, n_jobs=2)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_config_snapshot(self, small_pool):
        """Test the recorded combination config snapshot."""
        result = combine_classifier(small_pool, _uniform_forest(3, 2), NO_JITTER, M=5, seed=0)
        assert result.config_snapshot["jitter"]["kind"] == "none"
        assert result.config_snapshot["M"] == 5
        assert result.seconds >= 0.0

    def test_dimension_mismatch(self, small_pool):
        """Test rejecting inputs of mismatched dimension."""
        with pytest.raises(ValidationError, match="dimension mismatch"):
            combine_classifier(small_pool, _uniform_forest(3, 4), NO_JITTER, M=5, seed=0)


@pytest.mark.combine
@pytest.mark.unit
class TestConsensus:
    """Tests for precision-weighted averaging."""

    def test_single_machine_is_returned(self, rng):
        """Test single machine is returned."""
        draws = rng.standard_normal((20, 2))
        np.testing.assert_array_equal(combine_consensus([draws]).draws, draws)

    def test_identical_machines_average_to_themselves(self, rng):
        """Test identical machines average to themselves."""
        draws = rng.standard_normal((30, 3))
        result = combine_consensus([draws, draws, draws])
        np.testing.assert_allclose(result.draws, draws, atol=1e-10)

    def test_precise_machine_dominates(self, rng):
        """Test precise machine dominates."""
        sharp = 5.0 + 1e-3 * rng.standard_normal((200, 1))
        broad = rng.standard_normal((200, 1))
        result = combine_consensus([sharp, broad])
        assert np.mean(result.draws) == pytest.approx(5.0, abs=1e-3)

    def test_one_dimensional_input(self, rng):
        """Test one dimensional input."""
        result = combine_consensus([rng.standard_normal(10), rng.standard_normal(10)])
        assert result.draws.shape == (10, 1)

    def test_singular_covariance(self, rng):
        """Test rejecting a singular sub-posterior covariance."""
        flat = np.column_stack([rng.standard_normal(20), np.ones(20)])
        with pytest.raises(NumericalError, match="machine 2"):
            combine_consensus([rng.standard_normal((20, 2)), flat])

    def test_ragged_inputs(self, rng):
        """Test rejecting machines with ragged draw shapes."""
        with pytest.raises(ValidationError, match="ragged"):
            combine_consensus([rng.standard_normal((20, 2)), rng.standard_normal((19, 2))])


@pytest.mark.combine
@pytest.mark.unit
class TestWeierstrass:
    """Tests for the Weierstrass importance sampler."""

    def test_output_shape_and_determinism(self, small_pool):
        """Test output shape and determinism."""
        machines = small_pool.per_machine()
        a = combine_weierstrass(machines, h=0.5, M=40, seed=2)
        b = combine_weierstrass(machines, h=0.5, M=40, seed=2)
        assert a.draws.shape == (40, 2)
        np.testing.assert_array_equal(a.draws, b.draws)
        assert a.weights_used.sum() == pytest.approx(1.0)

    def test_output_near_agreement(self, rng):
        """Test output near agreement."""
        machines = [2.0 + 0.1 * rng.standard_normal((100, 1)) for _ in range(3)]
        result = combine_weierstrass(machines, h=0.1, M=500, seed=0)
        assert np.mean(result.draws) == pytest.approx(2.0, abs=0.05)

    def test_empty_reconstructable_area(self, rng):
        """Test empty reconstructable area."""
        machines = [rng.standard_normal((20, 1)), 1000.0 + rng.standard_normal((20, 1))]
        with pytest.raises(NumericalError, match="empty reconstructable area"):
            combine_weierstrass(machines, h=0.01, M=10, seed=0)

    def test_nonpositive_bandwidth(self, small_pool):
        """Test nonpositive bandwidth."""
        with pytest.raises(ValidationError, match="bandwidth"):
            combine_weierstrass(small_pool.per_machine(), h=0.0, M=10, seed=0)


@pytest.mark.combine
@pytest.mark.unit
class TestKdeProduct:
    """Tests for the KDE-product Gibbs sampler."""

    def test_output_shape_and_determinism(self, small_pool):
        """Test output shape and determinism."""
        machines = small_pool.per_machine()
        a = combine_kde_product(machines, h=0.5, M=30, seed=4, warmup=20)
        b = combine_kde_product(machines, h=0.5, M=30, seed=4, warmup=20)
        assert a.draws.shape == (30, 2)
        np.testing.assert_array_equal(a.draws, b.draws)
        assert a.method == CombineMethod.KDE_PRODUCT

    def test_output_near_agreement(self, rng):
        """Test output near agreement."""
        machines = [-1.0 + 0.1 * rng.standard_normal((100, 1)) for _ in range(2)]
        result = combine_kde_product(machines, h=0.1, M=300, seed=0, warmup=50)
        assert np.mean(result.draws) == pytest.approx(-1.0, abs=0.05)

    def test_no_acceptance_during_warmup(self):
        """Test no acceptance during warmup."""
        machines = [np.zeros((5, 1)), np.ones((5, 1))]
        with patch(
            "forestmerge.services.combine_service.derive_rng", return_value=_RejectingGenerator()
        ):
            with pytest.raises(NumericalError, match="bandwidth too small"):
                combine_kde_product(machines, h=0.5, M=5, seed=0, warmup=10)

    def test_bad_arguments(self, small_pool):
        """Test rejecting invalid sampler arguments."""
        with pytest.raises(ValidationError):
            combine_kde_product(small_pool.per_machine(), h=-1.0, M=5, seed=0)
        with pytest.raises(ValidationError):
            combine_kde_product(small_pool.per_machine(), h=1.0, M=5, seed=0, warmup=0)


@pytest.mark.combine
@pytest.mark.unit
class TestDefaultBandwidth:
    """Tests for the default kernel bandwidth."""

    def test_formula(self, rng):
        """Test the default bandwidth formula."""
        machines = [rng.standard_normal((50, 1)), 2.0 * rng.standard_normal((50, 1))]
        sd = np.mean([np.std(x, ddof=1) for x in machines])
        assert default_bandwidth(machines) == pytest.approx(sd * 100 ** (-1.0 / 5.0))


@pytest.mark.combine
@pytest.mark.unit
class TestWeierstrassInvariants:
    """Tests for the tuple weights, the kernel shape and bandwidth tuning."""

    def test_weights_ignore_machine_order(self, rng):
        """Test tuple weights are unchanged by permuting machines within each tuple."""
        for _ in range(1000):
            m = int(rng.integers(2, 6))
            tuples = rng.normal(scale=2.0, size=(8, m, 3))
            permuted = tuples[:, rng.permutation(m), :]
            np.testing.assert_allclose(
                tuple_log_weights(permuted, 0.7), tuple_log_weights(tuples, 0.7), rtol=1e-12, atol=1e-12
            )

    def test_huge_bandwidth_gives_uniform_weights(self, small_pool):
        """Test h=10^6 leaves every tuple with the same weight."""
        result = combine_weierstrass(small_pool.per_machine(), h=1e6, M=50, seed=0)
        tuples = result.config_snapshot["tuples"]
        np.testing.assert_allclose(result.weights_used, 1.0 / tuples, rtol=1e-9)

    def test_identical_machines_emit_draws_plus_noise(self, rng):
        """Test identical machines weight every paired tuple equally and add N(0, h^2/m) noise."""
        x = rng.standard_normal((50, 1))
        result = combine_weierstrass([x, x, x], h=1.0, M=20_000, seed=1, repairings=0)
        np.testing.assert_allclose(result.weights_used, 1.0 / 50, rtol=1e-12)
        assert np.mean(result.draws) == pytest.approx(np.mean(x), abs=0.05)
        assert np.var(result.draws) == pytest.approx(np.var(x) + 1.0 / 3.0, rel=0.05)

    def test_kernel_shape_has_unit_determinant(self, rng):
        """Test the kernel shape follows the draws' covariance with determinant one."""
        covariance = np.array([[4.0, 1.2], [1.2, 1.0]])
        machines = [rng.multivariate_normal(np.zeros(2), covariance, size=4000) for _ in range(3)]
        shape = kernel_shape(machines)
        assert np.linalg.det(shape) == pytest.approx(1.0, rel=1e-12)
        implied = shape @ shape.T
        np.testing.assert_allclose(implied, covariance / np.sqrt(np.linalg.det(covariance)), rtol=0.1)

    def test_one_dimensional_shape_is_identity(self, rng):
        """Test one-dimensional draws keep the plain isotropic kernel."""
        np.testing.assert_array_equal(kernel_shape([rng.normal(size=(20, 1))] * 2), np.eye(1))

    def test_tuned_bandwidth_is_smallest_reaching_target(self, rng):
        """Test the tuned bandwidth reaches the ESS target and the next grid step below does not."""
        unit = -rng.chisquare(4, size=5000)
        h, ess = tune_bandwidth(unit, reference=1.0, target_ess=500.0)
        assert ess >= 500.0
        below = h / 2.0**0.25
        w = np.exp(unit / below**2 - np.max(unit / below**2))
        assert (w.sum() ** 2 / np.sum(w**2)) < 500.0

    def test_tuned_run_records_bandwidth(self, small_pool):
        """Test h=None tunes the bandwidth and records it in the snapshot."""
        result = combine_weierstrass(small_pool.per_machine(), h=None, M=60, seed=3)
        assert result.config_snapshot["tuned"] is True
        assert result.config_snapshot["h"] > 0.0
        assert result.draws.shape == (60, 2)

    def test_bad_target_ess(self, small_pool):
        """Test a target ESS fraction outside (0, 1] is rejected."""
        with pytest.raises(ValidationError, match="target_ess"):
            combine_weierstrass(small_pool.per_machine(), h=None, M=10, seed=0, target_ess=0.0)


@pytest.mark.combine
@pytest.mark.unit
class TestKdeProductInvariants:
    """Tests for the KDE-product sampler's degenerate and symmetric cases."""

    def test_single_machine_is_smoothed_bootstrap(self, rng):
        """Test m=1 resamples the chain and adds N(0, h^2) kernel noise."""
        x = rng.standard_normal((200, 1))
        result = combine_kde_product([x], h=0.5, M=20_000, seed=2, warmup=10)
        assert np.mean(result.draws) == pytest.approx(np.mean(x), abs=0.03)
        assert np.var(result.draws) == pytest.approx(np.var(x) + 0.25, rel=0.05)

    def test_identical_machines_reach_the_tuple_distribution(self):
        """Test identical machines match the moments of the enumerated stationary tuple law."""
        x = np.arange(4.0)[:, None]
        h = 0.5
        a, b = np.meshgrid(x[:, 0], x[:, 0], indexing="ij")
        weights = np.exp(-((a - b) ** 2) / 2.0 / (2.0 * h * h))
        weights /= weights.sum()
        center = (a + b) / 2.0
        exact_mean = float(np.sum(weights * center))
        exact_var = float(np.sum(weights * center**2)) - exact_mean**2 + h * h / 2.0
        # matched tuples all carry the same mass
        np.testing.assert_allclose(np.diag(weights), weights[0, 0])

        result = combine_kde_product([x, x], h=h, M=50_000, seed=5, warmup=100)
        assert np.mean(result.draws) == pytest.approx(exact_mean, abs=0.08)
        assert np.var(result.draws) == pytest.approx(exact_var, rel=0.1)
