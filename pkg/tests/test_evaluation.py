"""
Unit tests for the evaluation metrics.
"""

import math

import numpy as np
import pytest

from forestmerge.core.exceptions import NumericalError, ValidationError
from forestmerge.schemas.evaluation import DensityTrace, MomentSummary
from forestmerge.services.evaluation_service import (
    count_modes,
    default_grid,
    density_trace,
    find_modes,
    gaussian_kl,
    pearson_correlation,
)


@pytest.mark.evaluation
@pytest.mark.unit
class TestGaussianKL:
    """Tests for the moment-based KL divergence."""

    def test_identical_moments(self):
        """Test identical moments."""
        summary = MomentSummary(mean=np.array([1.0, 2.0]), covariance=np.eye(2))
        assert gaussian_kl(summary, summary) == pytest.approx(0.0, abs=1e-12)

    def test_shifted_mean(self):
        """Test shifted mean."""
        full = MomentSummary(mean=np.zeros(1), covariance=np.eye(1))
        approx = MomentSummary(mean=np.ones(1), covariance=np.eye(1))
        assert gaussian_kl(full, approx) == pytest.approx(0.5)

    def test_scaled_variance(self):
        """Test scaled variance."""
        full = MomentSummary(mean=np.zeros(1), covariance=np.eye(1))
        approx = MomentSummary(mean=np.zeros(1), covariance=4.0 * np.eye(1))
        expected = 0.5 * (0.25 - 1.0 + math.log(4.0))
        assert gaussian_kl(full, approx) == pytest.approx(expected)

    def test_not_spd(self):
        """Test rejecting a covariance that is not positive definite."""
        full = MomentSummary(mean=np.zeros(2), covariance=np.eye(2))
        approx = MomentSummary(mean=np.zeros(2), covariance=np.diag([1.0, 0.0]))
        with pytest.raises(NumericalError, match="not SPD"):
            gaussian_kl(full, approx)

    def test_dimension_mismatch(self):
        """Test rejecting inputs of mismatched dimension."""
        with pytest.raises(ValidationError, match="dimension mismatch"):
            gaussian_kl(
                MomentSummary(mean=np.zeros(1), covariance=np.eye(1)),
                MomentSummary(mean=np.zeros(2), covariance=np.eye(2)),
            )


@pytest.mark.evaluation
@pytest.mark.unit
class TestGaussianKLInvariants:
    """Randomized checks of the moment-based KL."""

    @staticmethod
    def _random_summary(rng, d):
        a = rng.normal(size=(d, d))
        return MomentSummary(mean=rng.normal(size=d), covariance=a @ a.T + 0.1 * np.eye(d))

    def test_nonnegative(self, rng):
        """Test KL is nonnegative on 1000 random SPD pairs."""
        for _ in range(1000):
            d = int(rng.integers(1, 8))
            kl = gaussian_kl(self._random_summary(rng, d), self._random_summary(rng, d))
            assert kl >= -1e-12

    def test_common_rotation_leaves_kl_unchanged(self, rng):
        """Test rotating both Gaussians by the same orthogonal matrix keeps the KL."""
        for _ in range(1000):
            d = int(rng.integers(2, 8))
            full, approx = self._random_summary(rng, d), self._random_summary(rng, d)
            q, _ = np.linalg.qr(rng.normal(size=(d, d)))

            def rotate(s):
                return MomentSummary(mean=q @ s.mean, covariance=q @ s.covariance @ q.T)

            assert gaussian_kl(rotate(full), rotate(approx)) == pytest.approx(
                gaussian_kl(full, approx), rel=1e-8, abs=1e-10
            )


@pytest.mark.evaluation
@pytest.mark.unit
class TestPearsonCorrelation:
    """Tests for the correlation coefficient."""

    def test_perfect_correlation(self):
        """Test perfect correlation."""
        assert pearson_correlation([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0)
        assert pearson_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_matches_numpy(self, rng):
        """Test agreement with numpy corrcoef."""
        x = rng.standard_normal(30)
        y = x + rng.standard_normal(30)
        assert pearson_correlation(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1])

    def test_errors(self):
        """Test error cases raise ValidationError."""
        with pytest.raises(ValidationError, match="three pairs"):
            pearson_correlation([1, 2], [1, 2])
        with pytest.raises(ValidationError, match="zero variance"):
            pearson_correlation([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValidationError, match="length mismatch"):
            pearson_correlation([1, 2, 3], [1, 2])


@pytest.mark.evaluation
@pytest.mark.unit
class TestDensityTrace:
    """Tests for kernel density traces and mode counting."""

    def test_integrates_to_one(self, rng):
        """Test integrates to one."""
        trace = density_trace(rng.standard_normal(500), bandwidth=0.3)
        assert trace.integral() == pytest.approx(1.0, abs=1e-3)
        assert trace.grid.size == 512

    def test_weighted_trace(self):
        """Test weighted trace."""
        draws = np.linspace(-1, 1, 10)
        weights = np.zeros(10)
        weights[-1] = 1.0
        grid = np.linspace(-2, 2, 401)
        trace = density_trace(draws, 0.1, grid=grid, weights=weights)
        assert grid[np.argmax(trace.density)] == pytest.approx(1.0)

    def test_default_grid_range(self):
        """Test default grid range."""
        grid = default_grid(np.array([0.0, 1.0]), 0.5, points=11)
        assert grid[0] == pytest.approx(-1.5)
        assert grid[-1] == pytest.approx(2.5)

    def test_three_separated_modes(self, rng):
        """Test three separated modes."""
        draws = np.concatenate([rng.normal(c, 0.3, 300) for c in (-3.0, 0.0, 3.0)])
        trace = density_trace(draws, bandwidth=0.3)
        modes = find_modes(trace)
        assert count_modes(trace) == 3
        np.testing.assert_allclose(modes, [-3.0, 0.0, 3.0], atol=0.3)

    def test_boundary_maximum_is_not_a_mode(self):
        """Test boundary maximum is not a mode."""
        grid = np.linspace(0, 1, 50)
        trace = DensityTrace(grid=grid, density=np.exp(-grid))
        assert count_modes(trace) == 0

    def test_errors(self, rng):
        """Test error cases raise ValidationError."""
        with pytest.raises(ValidationError, match="at least 10"):
            density_trace(rng.standard_normal(5), 0.3)
        with pytest.raises(ValidationError, match="bandwidth"):
            density_trace(rng.standard_normal(20), 0.0)
        with pytest.raises(ValidationError, match="strictly increasing"):
            density_trace(rng.standard_normal(20), 0.3, grid=np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValidationError, match="one-dimensional"):
            density_trace(rng.standard_normal((20, 2)), 0.3)
