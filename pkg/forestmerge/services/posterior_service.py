"""
Data generation, row partitioning, prior fractionation and sub-posterior sampling.

Two closed-form testbeds (a conjugate multivariate normal mean and a labeled
three-component mixture) are sampled exactly; user models go through a
random-walk Metropolis sampler.
"""

import logging
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular, toeplitz
from scipy.special import logsumexp
from scipy.stats import norm

from forestmerge.core.exceptions import NumericalError, ValidationError
from forestmerge.schemas.posterior import (
    MIXTURE_MEANS,
    MIXTURE_WEIGHTS,
    Dataset,
    GaussianPosterior,
    MetropolisResult,
    MixturePosterior,
    Partition,
    PooledDraws,
    SubposteriorSample,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

LogTarget = Callable[[np.ndarray], float]


class CustomModel(Protocol):
    """A user model for the custom scenario."""

    initial_point: np.ndarray
    step_scale: float

    def log_likelihood(self, theta: np.ndarray, rows: np.ndarray) -> float: ...

    def log_prior(self, theta: np.ndarray) -> float: ...


# Data generation


def ar1_covariance(d: int, rho: float) -> np.ndarray:
    """
    Covariance with (g, l) entry rho ** |g - l|.

    Raises:
        ValidationError: If rho is outside (0, 1)
    """
    if d < 1:
        raise ValidationError("dimension must be at least 1")
    if not 0.0 < rho < 1.0:
        raise ValidationError(f"covariance not SPD: rho={rho} must lie in (0, 1)")
    return toeplitz(rho ** np.arange(d, dtype=np.float64))


def generate_gaussian_data(
    n: int, d: int, mu: np.ndarray, rho: float, rng: np.random.Generator
) -> Dataset:
    """
    Draw n i.i.d. rows from N(mu, Sigma(rho)).

    Args:
        n: Row count
        d: Dimension
        mu: Mean vector of length d
        rho: AR(1) correlation in (0, 1)
        rng: Random generator

    Returns:
        Dataset without labels

    Raises:
        ValidationError: If n < 1 or the covariance is not SPD
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    mu = np.asarray(mu, dtype=np.float64).ravel()
    if mu.shape != (d,):
        raise ValidationError(f"mu must have length {d}")
    sigma = ar1_covariance(d, rho)
    chol = np.linalg.cholesky(sigma)
    rows = mu + rng.standard_normal((n, d)) @ chol.T
    return Dataset(rows=rows)


def generate_mixture_data(n: int, rng: np.random.Generator) -> Dataset:
    """
    Draw n labeled rows from 1/4 N(-3,1) + 1/2 N(0,1) + 1/4 N(3,1).

    Labels are stored as 1, 2, 3 (left to right component).

    Raises:
        ValidationError: If n < 3
    """
    if n < 3:
        raise ValidationError("n must be at least 3")
    labels = rng.choice(3, size=n, p=MIXTURE_WEIGHTS) + 1
    x = MIXTURE_MEANS[labels - 1] + rng.standard_normal(n)
    return Dataset(rows=x[:, None], labels=labels.astype(np.int64))


# Partitioning


def partition_rows(n: int, m: int, rng: np.random.Generator) -> Partition:
    """
    Split a random permutation of range(n) into m near-equal contiguous blocks.

    Block sizes differ by at most one.

    Raises:
        ValidationError: If m < 2 or m > n
    """
    if m < 2:
        raise ValidationError("m must be at least 2")
    if m > n:
        raise ValidationError(f"cannot split {n} rows over {m} machines")
    blocks = np.array_split(rng.permutation(n), m)
    return Partition(index_sets=tuple(np.sort(block) for block in blocks))


def stratified_partition(labels: np.ndarray, m: int, rng: np.random.Generator) -> Partition:
    """
    Deal rows to machines round-robin, class by class, so every machine sees
    every mixture component and sizes differ by at most one.

    Raises:
        ValidationError: If m < 2 or a class has fewer than m rows
    """
    labels = np.asarray(labels)
    if m < 2:
        raise ValidationError("m must be at least 2")
    order = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        if members.size < m:
            raise ValidationError(
                f"empty mixture component: label {label} has {members.size} rows for {m} machines"
            )
        order.append(rng.permutation(members))
    dealt = np.concatenate(order)
    machine = np.arange(dealt.size) % m
    return Partition(index_sets=tuple(np.sort(dealt[machine == i]) for i in range(m)))


# Prior fractionation


def fractionate_prior_power(m: int) -> float:
    """
    Exponent applied to the prior on each machine: pi_i ∝ pi ** (1/m).

    Raises:
        ValidationError: If m < 1
    """
    if m < 1:
        raise ValidationError("m must be at least 1")
    return 1.0 / m


def fractionated_log_prior(log_prior: LogTarget, m: int) -> LogTarget:
    """Log of the fractionated prior, up to a constant."""
    power = fractionate_prior_power(m)

    def sub_log_prior(theta: np.ndarray) -> float:
        return power * log_prior(theta)

    return sub_log_prior


# Conjugate Gaussian testbed


def gaussian_subposterior(data_part: Dataset, sigma: np.ndarray) -> GaussianPosterior:
    """
    Posterior of the mean under a flat prior: N(sample mean, Sigma / N_i).

    Raises:
        ValidationError: If the partition is empty
    """
    if data_part.n == 0:
        raise ValidationError("empty partition")
    return GaussianPosterior(
        mean=data_part.rows.mean(axis=0), covariance=np.asarray(sigma) / data_part.n
    )


def gaussian_full_posterior(dataset: Dataset, sigma: np.ndarray) -> GaussianPosterior:
    """Full-data posterior of the mean (same construction on all rows)."""
    return gaussian_subposterior(dataset, sigma)


def gaussian_log_density(p: GaussianPosterior, theta: np.ndarray) -> np.ndarray:
    """
    Normalized log density of N(mean, covariance) at each row of theta.

    Raises:
        NumericalError: If the covariance is not SPD
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    chol = _cholesky(p.covariance)
    z = solve_triangular(chol, (theta - p.mean).T, lower=True).T
    return _standard_log_density(chol, z)


def _cholesky(covariance: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as e:
        raise NumericalError("posterior covariance not SPD") from e


def _standard_log_density(chol: np.ndarray, z: np.ndarray) -> np.ndarray:
    d = chol.shape[0]
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * LOG_2PI + log_det) - 0.5 * np.sum(z**2, axis=1)


def sample_gaussian(p: GaussianPosterior, N: int, rng: np.random.Generator) -> SubposteriorSample:
    """
    Exact draws from N(mean, covariance) with their normalized log densities.

    Raises:
        ValidationError: If N < 1
        NumericalError: If the covariance is not SPD
    """
    if N < 1:
        raise ValidationError("N must be at least 1")
    chol = _cholesky(p.covariance)
    z = rng.standard_normal((N, p.dimension))
    draws = p.mean + z @ chol.T
    return SubposteriorSample(draws=draws, log_densities=_standard_log_density(chol, z))


# Labeled mixture testbed


def _mixture_posterior(part: Dataset) -> MixturePosterior:
    if part.labels is None:
        raise ValidationError("mixture posterior needs labeled rows")
    x = part.rows[:, 0]
    means = np.empty(3)
    counts = np.empty(3)
    for c in range(3):
        members = x[part.labels == c + 1]
        if members.size == 0:
            raise ValidationError(f"empty mixture component: component {c + 1} has no rows")
        means[c] = members.mean()
        counts[c] = members.size
    return MixturePosterior(component_means=means, component_variances=1.0 / counts)


def mixture_subposterior(labeled_part: Dataset) -> MixturePosterior:
    """
    Three-mode sub-posterior: component c centered at the partition's class-c mean
    with variance 1 / N_ic, weights (1/4, 1/2, 1/4).

    Raises:
        ValidationError: If a component has no rows in the partition
    """
    return _mixture_posterior(labeled_part)


def mixture_full_posterior(dataset: Dataset) -> MixturePosterior:
    """The same three-mode construction applied to the whole dataset."""
    return _mixture_posterior(dataset)


def mixture_log_density(p: MixturePosterior, x: np.ndarray) -> np.ndarray:
    """Log of the full three-component mixture density at each point."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    component = norm.logpdf(x, loc=p.component_means, scale=np.sqrt(p.component_variances))
    return logsumexp(component + np.log(p.component_weights), axis=1)


def sample_mixture(p: MixturePosterior, N: int, rng: np.random.Generator) -> SubposteriorSample:
    """
    Exact mixture draws (component by weight, then normal) with mixture log densities.

    Raises:
        ValidationError: If N < 1
    """
    if N < 1:
        raise ValidationError("N must be at least 1")
    component = rng.choice(3, size=N, p=p.component_weights)
    x = p.component_means[component] + np.sqrt(p.component_variances[component]) * rng.standard_normal(N)
    return SubposteriorSample(draws=x[:, None], log_densities=mixture_log_density(p, x))


# Generic Metropolis sampler


def random_walk_metropolis(
    log_target: LogTarget,
    init: np.ndarray,
    N: int,
    step_scale: Union[float, np.ndarray],
    rng: np.random.Generator,
    burn_in: Optional[int] = None,
) -> MetropolisResult:
    """
    Gaussian random-walk Metropolis.

    Args:
        log_target: Log density (up to a constant) of the target
        init: Starting point
        N: Number of retained draws
        step_scale: Proposal standard deviation (scalar or per coordinate)
        rng: Random generator
        burn_in: Discarded leading iterations (default: 10% of N)

    Returns:
        MetropolisResult with N draws, log_target at each draw, acceptance rate

    Raises:
        ValidationError: If N < 1, step_scale <= 0 or log_target is not finite at init
    """
    if N < 1:
        raise ValidationError("N must be at least 1")
    scale = np.asarray(step_scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValidationError("step_scale must be positive")
    burn_in = N // 10 if burn_in is None else burn_in
    if burn_in < 0:
        raise ValidationError("burn_in must be nonnegative")

    current = np.atleast_1d(np.asarray(init, dtype=np.float64)).copy()
    current_log = float(log_target(current))
    if not np.isfinite(current_log):
        raise ValidationError("log_target is not finite at init")

    d = current.size
    total = burn_in + N
    steps = rng.standard_normal((total, d)) * scale
    log_u = np.log(rng.uniform(size=total))
    draws = np.empty((N, d))
    log_densities = np.empty(N)
    accepted = 0

    for it in range(total):
        proposal = current + steps[it]
        proposal_log = float(log_target(proposal))
        if np.isfinite(proposal_log) and log_u[it] < proposal_log - current_log:
            current, current_log = proposal, proposal_log
            accepted += 1
        if it >= burn_in:
            draws[it - burn_in] = current
            log_densities[it - burn_in] = current_log

    acceptance_rate = accepted / total
    if acceptance_rate < 0.05:
        logger.warning(f"Metropolis acceptance rate {acceptance_rate:.3f}; consider a smaller step_scale")
    logger.debug(f"Metropolis finished: {total} iterations, acceptance {acceptance_rate:.3f}")
    return MetropolisResult(draws=draws, log_densities=log_densities, acceptance_rate=acceptance_rate)


def custom_subposterior_target(model: CustomModel, data_part: Dataset, m: int) -> LogTarget:
    """Sub-posterior log target: log-likelihood on the partition plus the 1/m-power log prior."""
    sub_log_prior = fractionated_log_prior(model.log_prior, m)
    rows = data_part.rows

    def log_target(theta: np.ndarray) -> float:
        return model.log_likelihood(theta, rows) + sub_log_prior(theta)

    return log_target


# Pooling


def pool_draws(per_machine: Sequence[SubposteriorSample]) -> PooledDraws:
    """
    Stack per-machine draws in machine order and attach 1-based machine labels.

    Raises:
        ValidationError: If no machine contributed or the inputs are ragged
    """
    if not per_machine:
        raise ValidationError("no machine contributed draws")
    draws = [np.atleast_2d(np.asarray(s.draws, dtype=np.float64)) for s in per_machine]
    densities = [np.asarray(s.log_densities, dtype=np.float64).ravel() for s in per_machine]
    N, d = draws[0].shape
    for i, (x, ld) in enumerate(zip(draws, densities), start=1):
        if x.shape != (N, d) or ld.shape != (N,):
            raise ValidationError(
                f"ragged inputs: machine {i} sent {x.shape} draws and {ld.shape[0]} densities, "
                f"expected ({N}, {d})"
            )
    m = len(draws)
    return PooledDraws(
        theta=np.vstack(draws),
        machine=np.repeat(np.arange(1, m + 1), N),
        log_density=np.concatenate(densities),
    )
