"""
Combiners turning pooled sub-posterior draws into approximate full-posterior draws.

The classifier combiner importance-resamples a jittered candidate pool with
weights from the trained forest. Consensus averaging, the Weierstrass
importance sampler and the KDE-product Gibbs sampler serve as baselines.
"""

import logging
import math
import time
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from forestmerge.core.exceptions import NumericalError, ValidationError
from forestmerge.core.gather import parallel_map
from forestmerge.core.numerics import (
    Stream,
    derive_rng,
    effective_sample_size,
    normalize_log_weights,
    resample_indices,
)
from forestmerge.schemas.combine import (
    CandidatePool,
    CombineMethod,
    CombineResult,
    JitterConfig,
    JitterKind,
)
from forestmerge.schemas.forest import Forest
from forestmerge.schemas.posterior import PooledDraws
from forestmerge.services.criterion_service import approx_posterior_weights
from forestmerge.services.forest_service import predict_proba

logger = logging.getLogger(__name__)

# exp() of anything below this is zero in double precision
LOG_UNDERFLOW = -745.0
PREDICT_CHUNK = 4096
# Multipliers of the reference bandwidth scanned when h is tuned
BANDWIDTH_GRID = 2.0 ** (np.arange(-40, 41) / 4.0)


def _check_machines(per_machine_draws: Sequence[np.ndarray]) -> list[np.ndarray]:
    draws = []
    for x in per_machine_draws:
        x = np.asarray(x, dtype=np.float64)
        draws.append(x[:, None] if x.ndim == 1 else x)
    if not draws:
        raise ValidationError("no machines given")
    shapes = {x.shape for x in draws}
    if len(shapes) != 1:
        raise ValidationError(f"ragged inputs: machines have draw shapes {sorted(shapes)}")
    if draws[0].shape[0] < 2:
        raise ValidationError("each machine needs at least two draws")
    return draws


def _log_weights_summary(method: str, weights: np.ndarray) -> None:
    ess = effective_sample_size(weights)
    if ess < 0.01 * weights.size:
        logger.warning(f"{method}: degenerate importance weights (ESS {ess:.1f} of {weights.size})")
    else:
        logger.info(f"{method}: ESS {ess:.1f} of {weights.size} candidates")


def default_bandwidth(per_machine_draws: Sequence[np.ndarray]) -> float:
    """
    Silverman-type bandwidth: mean sub-posterior standard deviation times (mN)^(-1/(4+d)).
    """
    draws = _check_machines(per_machine_draws)
    m = len(draws)
    n, d = draws[0].shape
    sd = np.mean([np.std(x, axis=0, ddof=1) for x in draws])
    return float(sd * (m * n) ** (-1.0 / (4 + d)))


def jitter_augment(
    pooled: PooledDraws, jc: JitterConfig, rng: np.random.Generator
) -> CandidatePool:
    """
    Candidate pool: the original draws followed by `copies_per_draw` jittered copies.

    Multiplicative jitter scales every coordinate by an independent
    Uniform(low, high) variate. Additive jitter adds N(0, (additive_scale * s_j)^2)
    noise, s_j being the pooled standard deviation of coordinate j.

    Returns:
        CandidatePool with the stacked matrix and the source row of each candidate
    """
    theta = pooled.theta
    n = pooled.size
    if jc.kind == JitterKind.NONE or jc.copies_per_draw == 0:
        return CandidatePool(theta=theta.copy(), source=np.arange(n))

    copies = []
    for _ in range(jc.copies_per_draw):
        if jc.kind == JitterKind.MULTIPLICATIVE:
            copies.append(theta * rng.uniform(jc.low, jc.high, size=theta.shape))
        else:
            scale = jc.additive_scale * np.std(theta, axis=0)
            copies.append(theta + rng.standard_normal(theta.shape) * scale)
    return CandidatePool(
        theta=np.vstack([theta, *copies]),
        source=np.tile(np.arange(n), jc.copies_per_draw + 1),
    )


def _pool_probabilities(forest: Forest, points: np.ndarray, n_jobs: Optional[int]) -> np.ndarray:
    chunks = np.array_split(points, max(1, math.ceil(points.shape[0] / PREDICT_CHUNK)))
    return np.vstack(parallel_map(lambda c: predict_proba(forest, c), chunks, n_jobs=n_jobs))


def combine_classifier(
    pooled: PooledDraws,
    forest: Forest,
    jc: JitterConfig,
    M: int,
    seed: int,
    n_jobs: Optional[int] = None,
) -> CombineResult:
    """
    Resample M draws from the candidate pool with approximate-posterior weights.

    Candidates the forest places outside the reconstructable area get low weight.

    Args:
        pooled: Pooled sub-posterior draws
        forest: Forest trained on draws of the same dimension
        jc: Jitter augmentation
        M: Number of output draws
        seed: Seed of the jitter and resampling streams
        n_jobs: Worker count for probability evaluation

    Returns:
        CombineResult with the resampled draws and the candidate weights

    Raises:
        ValidationError: On a dimension mismatch or M < 1
    """
    started = time.perf_counter()
    if forest.dimension != pooled.dimension:
        raise ValidationError(
            f"dimension mismatch: forest expects {forest.dimension}, draws have {pooled.dimension}"
        )
    candidates = jitter_augment(pooled, jc, derive_rng(seed, Stream.JITTER))
    probs = _pool_probabilities(forest, candidates.theta, n_jobs)
    weights = approx_posterior_weights(probs)
    _log_weights_summary("classifier", weights)

    index = resample_indices(weights, M, derive_rng(seed, Stream.COMBINE))
    return CombineResult(
        draws=candidates.theta[index],
        method=CombineMethod.CLASSIFIER,
        seed=seed,
        config_snapshot={"jitter": jc.model_dump(mode="json"), "forest": forest.config.model_dump(), "M": M},
        weights_used=weights,
        seconds=time.perf_counter() - started,
    )


def combine_consensus(per_machine_draws: Sequence[np.ndarray], seed: int = 0) -> CombineResult:
    """
    Precision-weighted averaging of draws paired by iteration index.

    W_i is the inverse sample covariance of machine i; draw t of the output is
    (sum_i W_i)^-1 sum_i W_i theta_i^(t). A single machine is returned unchanged.

    Raises:
        ValidationError: On ragged inputs
        NumericalError: If a machine's sample covariance is singular
    """
    started = time.perf_counter()
    draws = _check_machines(per_machine_draws)
    if len(draws) == 1:
        combined = draws[0].copy()
    else:
        d = draws[0].shape[1]
        precision_sum = np.zeros((d, d))
        weighted_sum = np.zeros_like(draws[0])
        for i, x in enumerate(draws, start=1):
            covariance = np.atleast_2d(np.cov(x, rowvar=False))
            try:
                factor = cho_factor(covariance)
            except LinAlgError as e:
                raise NumericalError(f"singular covariance on machine {i}") from e
            precision = cho_solve(factor, np.eye(d))
            precision_sum += precision
            weighted_sum += x @ precision
        combined = np.linalg.solve(precision_sum, weighted_sum.T).T
    return CombineResult(
        draws=combined,
        method=CombineMethod.CONSENSUS,
        seed=seed,
        config_snapshot={"m": len(draws)},
        seconds=time.perf_counter() - started,
    )


def tuple_log_weights(tuples: np.ndarray, h: float) -> np.ndarray:
    """-m (mean ||r||^2 - ||mean r||^2) / (2 h^2) for tuples shaped (T, m, d)."""
    centered = tuples - tuples.mean(axis=1, keepdims=True)
    return -np.sum(centered**2, axis=(1, 2)) / (2.0 * h * h)


def kernel_shape(per_machine_draws: Sequence[np.ndarray]) -> np.ndarray:
    """
    Lower Cholesky factor of the average sub-posterior covariance, scaled to unit determinant.

    The Weierstrass kernel h^2 K K^T then keeps the sub-posteriors' orientation
    while h alone sets its size. One-dimensional draws get K = [[1]].
    """
    draws = _check_machines(per_machine_draws)
    d = draws[0].shape[1]
    if d == 1:
        return np.eye(1)
    covariance = np.mean([np.cov(x, rowvar=False) for x in draws], axis=0)
    try:
        factor = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        logger.warning("weierstrass: singular draw covariance, falling back to an isotropic kernel")
        return np.eye(d)
    return factor / np.exp(np.mean(np.log(np.diag(factor))))


def _tuple_indices(m: int, n: int, repairings: int, rng: np.random.Generator) -> np.ndarray:
    """Iteration-paired index tuples followed by `repairings` randomly permuted sets, shaped (T, m)."""
    sets = [np.tile(np.arange(n)[:, None], (1, m))]
    for _ in range(repairings):
        sets.append(np.column_stack([rng.permutation(n) for _ in range(m)]))
    return np.vstack(sets)


def tune_bandwidth(unit_log_w: np.ndarray, reference: float, target_ess: float) -> tuple[float, float]:
    """
    Smallest bandwidth on a geometric grid around `reference` whose tuple weights reach `target_ess`.

    Args:
        unit_log_w: Tuple log weights at h = 1
        reference: Center of the grid (2^-10 to 2^10 times it, quarter-octave steps)
        target_ess: Effective sample size the weights must reach

    Returns:
        (h, ess); the top of the grid when no bandwidth reaches the target
    """
    ess = 0.0
    for h in reference * BANDWIDTH_GRID:
        ess = effective_sample_size(normalize_log_weights(unit_log_w / (h * h)))
        if ess >= target_ess:
            return float(h), ess
    logger.warning(f"weierstrass: ESS {ess:.1f} below target {target_ess:.1f} on the whole grid")
    return float(reference * BANDWIDTH_GRID[-1]), ess


def combine_weierstrass(
    per_machine_draws: Sequence[np.ndarray],
    h: Optional[float],
    M: int,
    seed: int,
    repairings: int = 50,
    target_ess: float = 0.1,
    shaped: bool = True,
) -> CombineResult:
    """
    Weierstrass importance sampler over machine tuples.

    Tuples pair draws by iteration index, plus `repairings` extra tuple sets
    with every machine's draws randomly permuted. Each tuple is weighted by
    exp(-m (mean ||r||^2 - ||mean r||^2) / (2 h^2)); M tuples are resampled
    and each emits N(mean r, h^2 / m I).

    With `shaped`, distances are measured after mapping the draws through
    kernel_shape, so the kernel covariance is h^2 K K^T instead of h^2 I.
    With h=None the bandwidth is tuned: the smallest h whose weights keep an
    effective sample size of `target_ess * M`.

    Raises:
        ValidationError: If h <= 0 or the inputs are ragged
        NumericalError: If every tuple weight underflows
    """
    started = time.perf_counter()
    if h is not None and h <= 0:
        raise ValidationError("bandwidth must be positive")
    if not 0.0 < target_ess <= 1.0:
        raise ValidationError("target_ess must be in (0, 1]")
    draws = _check_machines(per_machine_draws)
    rng = derive_rng(seed, Stream.COMBINE)
    m = len(draws)
    n, d = draws[0].shape

    shape = kernel_shape(draws) if shaped else np.eye(d)
    whitened = [solve_triangular(shape, x.T, lower=True).T for x in draws]
    indices = _tuple_indices(m, n, repairings, rng)
    tuples = np.stack([z[indices[:, i]] for i, z in enumerate(whitened)], axis=1)
    unit_log_w = tuple_log_weights(tuples, 1.0)
    del tuples

    tuned = h is None
    if tuned:
        reference = default_bandwidth(whitened) or 1.0
        h, ess = tune_bandwidth(unit_log_w, reference, target_ess * M)
        logger.info(f"weierstrass: tuned h={h:.4g} (ESS {ess:.1f})")
    log_w = unit_log_w / (h * h)
    if np.max(log_w) < LOG_UNDERFLOW:
        raise NumericalError("empty reconstructable area at this bandwidth")
    weights = normalize_log_weights(log_w)
    _log_weights_summary("weierstrass", weights)

    index = resample_indices(weights, M, rng)
    chosen = indices[index]
    centers = np.mean([x[chosen[:, i]] for i, x in enumerate(draws)], axis=0)
    noise = rng.standard_normal((M, d)) * (h / math.sqrt(m))
    output = centers + noise @ shape.T
    return CombineResult(
        draws=output,
        method=CombineMethod.WEIERSTRASS,
        seed=seed,
        config_snapshot={
            "h": h,
            "tuned": tuned,
            "shaped": shaped,
            "repairings": repairings,
            "tuples": int(indices.shape[0]),
            "M": M,
        },
        weights_used=weights,
        seconds=time.perf_counter() - started,
    )


def combine_kde_product(
    per_machine_draws: Sequence[np.ndarray],
    h: float,
    M: int,
    seed: int,
    warmup: int = 1000,
) -> CombineResult:
    """
    Gibbs sampler on the product of per-machine Gaussian KDEs.

    The state is one draw index per machine. Each sweep proposes a uniform new
    index for every machine in turn and accepts by the ratio of tuple weights
    prod_i N(theta_i | tuple mean, h^2 I). After `warmup` sweeps, every sweep
    emits one draw from N(tuple mean, h^2 / m I).

    Raises:
        ValidationError: If h <= 0, warmup < 1 or the inputs are ragged
        NumericalError: If no proposal is accepted during warm-up
    """
    started = time.perf_counter()
    if h <= 0:
        raise ValidationError("bandwidth must be positive")
    if warmup < 1:
        raise ValidationError("warm-up must be at least one sweep")
    draws = _check_machines(per_machine_draws)
    rng = derive_rng(seed, Stream.COMBINE)
    m = len(draws)
    n, d = draws[0].shape
    two_h2 = 2.0 * h * h

    index = rng.integers(0, n, size=m)
    current = np.stack([draws[i][index[i]] for i in range(m)])
    total = current.sum(axis=0)
    squares = float(np.sum(current**2))

    def spread(sum_vec: np.ndarray, sum_sq: float) -> float:
        return sum_sq - float(sum_vec @ sum_vec) / m

    current_spread = spread(total, squares)
    output = np.empty((M, d))
    accepted = 0
    sweeps = warmup + M
    for sweep in range(sweeps):
        proposals = rng.integers(0, n, size=m)
        thresholds = np.log(rng.uniform(size=m))
        for i in range(m):
            new = draws[i][proposals[i]]
            new_total = total - current[i] + new
            new_squares = squares - float(current[i] @ current[i]) + float(new @ new)
            new_spread = spread(new_total, new_squares)
            if thresholds[i] < (current_spread - new_spread) / two_h2:
                current[i] = new
                total, squares, current_spread = new_total, new_squares, new_spread
                if sweep < warmup:
                    accepted += 1
        if sweep == warmup - 1 and accepted == 0:
            raise NumericalError("bandwidth too small: no proposal accepted during warm-up")
        if sweep >= warmup:
            output[sweep - warmup] = total / m + rng.standard_normal(d) * (h / math.sqrt(m))

    logger.info(f"kde-product: warm-up acceptance {accepted / (warmup * m):.3f}")
    return CombineResult(
        draws=output,
        method=CombineMethod.KDE_PRODUCT,
        seed=seed,
        config_snapshot={"h": h, "warmup": warmup, "M": M},
        seconds=time.perf_counter() - started,
    )
