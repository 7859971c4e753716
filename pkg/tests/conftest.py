"""
Pytest configuration and shared fixtures.
"""

from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from forestmerge.core.storage import ArtifactStore
from forestmerge.schemas.experiment import ExperimentConfig
from forestmerge.schemas.posterior import PooledDraws, SubposteriorSample
from forestmerge.services.posterior_service import pool_draws

SMALL_CONFIG = """\
scenario=gaussian
n=300
m=3
d=2
draws_per_machine=60
tuning_budget=3
kde_warmup=30
"""


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test data."""
    return np.random.default_rng(20240611)


def make_pool(
    rng: np.random.Generator, m: int = 3, N: int = 60, d: int = 2, separation: float = 0.5
) -> PooledDraws:
    """Pool of Gaussian draws, machine i centered at i * separation in every coordinate."""
    samples = []
    for i in range(m):
        draws = rng.standard_normal((N, d)) + i * separation
        log_densities = -0.5 * np.sum((draws - i * separation) ** 2, axis=1)
        samples.append(SubposteriorSample(draws=draws, log_densities=log_densities))
    return pool_draws(samples)


@pytest.fixture
def pool_factory(rng: np.random.Generator) -> Callable[..., PooledDraws]:
    """Build pools from the shared generator."""

    def factory(**kwargs) -> PooledDraws:
        return make_pool(rng, **kwargs)

    return factory


@pytest.fixture
def small_pool(pool_factory) -> PooledDraws:
    """Three machines, 60 draws each, two dimensions."""
    return pool_factory()


@pytest.fixture
def store(tmp_path: Path) -> ArtifactStore:
    """Artifact store in a temporary directory."""
    return ArtifactStore(tmp_path / "artifacts")


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    """Small Gaussian experiment file."""
    path = tmp_path / "experiment.env"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def small_config(tmp_path: Path) -> ExperimentConfig:
    """Small Gaussian experiment writing into a temporary directory."""
    return ExperimentConfig(
        n=300,
        m=3,
        d=2,
        draws_per_machine=60,
        tuning_budget=3,
        kde_warmup=30,
        output_dir=str(tmp_path / "run"),
    )
