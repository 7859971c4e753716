"""
Forest selection criterion.

Turns classifier probabilities into reconstructable-area probabilities, the
resampling weights of the approximate posterior, and an upper bound on the
KL divergence from the full posterior that needs only sub-posterior densities.
The random search trains forests on the pooled draws and keeps the one with
the smallest bound.
"""

import logging
import math
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from forestmerge.core.exceptions import ForestMergeError, NumericalError, ValidationError
from forestmerge.core.gather import parallel_map
from forestmerge.core.numerics import (
    FloatArray,
    Stream,
    derive_rng,
    log_sum_exp,
    normalize_log_weights,
)
from forestmerge.schemas.criterion import (
    CriterionReport,
    SearchTrace,
    SearchTrial,
    TheoremCheck,
)
from forestmerge.schemas.forest import Forest, SearchSpace
from forestmerge.schemas.posterior import PooledDraws
from forestmerge.services.forest_service import predict_proba, train_forest

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 1000

TrialCallback = Callable[[int, Forest], Optional[float]]


def subposterior_weights(pooled: PooledDraws) -> FloatArray:
    """
    Density weights w_it = pi(theta_i^(t) | X_i) / C_sub over the whole pool.

    Raises:
        ValidationError: On an empty pool or a non-finite log density
    """
    return normalize_log_weights(pooled.log_density)


def _check_probabilities(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.ndim != 2 or probs.shape[0] == 0 or probs.shape[1] < 1:
        raise ValidationError("empty vector")
    if not np.all(np.isfinite(probs)) or np.any(probs <= 0):
        raise ValidationError("class probabilities must be strictly positive and finite")
    return probs


def reconstructable_log_probability(probs: np.ndarray) -> FloatArray:
    """
    log Pr(P = Q) per row: log m + (1/m) sum_j log p_j.

    Raises:
        ValidationError: If any probability is not strictly positive
    """
    probs = _check_probabilities(probs)
    m = probs.shape[1]
    return math.log(m) + np.mean(np.log(probs), axis=1)


def reconstructable_probability(p: np.ndarray) -> float:
    """
    Pr(P = Q) = exp(-KL(Q || P)) for one probability vector, Q uniform.

    Equals one exactly at the uniform vector and is below one elsewhere.

    Raises:
        ValidationError: If any p_j <= 0
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    return float(np.exp(reconstructable_log_probability(p)[0]))


def approx_posterior_weights(probs: np.ndarray) -> FloatArray:
    """Approximate-posterior weights f_k = Pr(P_k = Q) / C_f over the rows of probs."""
    return normalize_log_weights(reconstructable_log_probability(probs))


def _check_pairing(probs: np.ndarray, pooled: PooledDraws) -> np.ndarray:
    probs = _check_probabilities(probs)
    if probs.shape[0] != pooled.size:
        raise ValidationError(
            f"probability matrix has {probs.shape[0]} rows, pool has {pooled.size} draws"
        )
    return probs


def upper_bound_kl(probs: np.ndarray, pooled: PooledDraws) -> float:
    """
    Upper bound (up to a classifier-free factor) of KL(full posterior || approximation).

    Args:
        probs: Floored class probabilities of the pooled draws, one row per draw
        pooled: The pooled draws the rows belong to

    Returns:
        log C_f - log m - (1/m) sum_k w_k sum_j log p_kj
    """
    probs = _check_pairing(probs, pooled)
    m = probs.shape[1]
    log_c_f = log_sum_exp(reconstructable_log_probability(probs))
    w_sub = subposterior_weights(pooled)
    cross = float(w_sub @ np.sum(np.log(probs), axis=1))
    return log_c_f - math.log(m) - cross / m


def evaluate_criterion(forest: Forest, pooled: PooledDraws) -> CriterionReport:
    """Bundle the criterion quantities of one forest on one pool."""
    probs = predict_proba(forest, pooled.theta)
    log_recon = reconstructable_log_probability(probs)
    return CriterionReport(
        recon_prob=np.exp(log_recon),
        f_weights=normalize_log_weights(log_recon),
        w_sub=subposterior_weights(pooled),
        log_c_f=log_sum_exp(log_recon),
        ub_kl=upper_bound_kl(probs, pooled),
        config=forest.config,
    )


def verify_theorem_bound(
    pooled: PooledDraws, probs: np.ndarray, full_log_density: np.ndarray
) -> TheoremCheck:
    """
    Brute-force check of KL(f_pi || f) <= H * bound on a small pool.

    f_pi is the full posterior normalized over the pooled draws, f the
    approximate-posterior weights; H = max_k f_pi(k) / min_k w_sub(k).

    Args:
        pooled: At most BRUTE_FORCE_LIMIT draws
        probs: Floored class probabilities of the pooled draws
        full_log_density: log pi(theta_k | X) up to a constant, per draw

    Returns:
        TheoremCheck(kl, bound, H, holds)

    Raises:
        ValidationError: On a pool above the brute-force limit or a length mismatch
        NumericalError: If the exact KL is not finite
    """
    if pooled.size > BRUTE_FORCE_LIMIT:
        raise ValidationError(
            f"brute-force check is limited to {BRUTE_FORCE_LIMIT} draws, got {pooled.size}"
        )
    probs = _check_pairing(probs, pooled)
    full = np.asarray(full_log_density, dtype=np.float64).ravel()
    if full.size != pooled.size:
        raise ValidationError("full_log_density length does not match the pool")

    log_f_pi = full - logsumexp(full)
    log_recon = reconstructable_log_probability(probs)
    log_f = log_recon - logsumexp(log_recon)
    kl = float(np.sum(np.exp(log_f_pi) * (log_f_pi - log_f)))
    if not math.isfinite(kl):
        raise NumericalError("non-finite KL between full and approximate weights")

    log_w_sub = pooled.log_density - logsumexp(pooled.log_density)
    h = float(np.exp(np.max(log_f_pi) - np.min(log_w_sub)))
    bound = upper_bound_kl(probs, pooled)
    slack = 1e-12 * max(1.0, abs(h * bound))
    return TheoremCheck(kl=kl, bound=bound, H=h, holds=kl <= h * bound + slack)


def holdout_split(
    pooled: PooledDraws, fraction: float, rng: np.random.Generator
) -> tuple[PooledDraws, PooledDraws]:
    """
    Split off the same share of every machine's draws for evaluation.

    Returns:
        (training pool, held-out pool)

    Raises:
        ValidationError: If either side would be empty
    """
    per_machine = pooled.draws_per_machine
    held = int(round(fraction * per_machine))
    if not 0 < held < per_machine:
        raise ValidationError(
            f"holdout_fraction={fraction} leaves an empty side for {per_machine} draws per machine"
        )
    train_idx, test_idx = [], []
    for i in range(1, pooled.m + 1):
        rows = np.flatnonzero(pooled.machine == i)
        chosen = rng.permutation(rows.size)
        test_idx.append(np.sort(rows[chosen[:held]]))
        train_idx.append(np.sort(rows[chosen[held:]]))
    return pooled.take(np.concatenate(train_idx)), pooled.take(np.concatenate(test_idx))


def _run_trial(
    trial: int,
    train_pool: PooledDraws,
    eval_pool: PooledDraws,
    space: SearchSpace,
    seed: int,
    on_trial: Optional[TrialCallback],
) -> SearchTrial:
    rng = derive_rng(seed, Stream.TUNE, trial)
    config = space.sample(rng, train_pool.dimension)
    train_seed = int(rng.integers(0, 2**31 - 1))
    try:
        forest = train_forest(train_pool, config, seed=train_seed, n_jobs=1)
        ub = upper_bound_kl(predict_proba(forest, eval_pool.theta), eval_pool)
        true_kl = on_trial(trial, forest) if on_trial is not None else None
    except ForestMergeError as e:
        logger.warning(f"Trial {trial} failed: {e}")
        return SearchTrial(trial=trial, config=config, seed=train_seed, error=str(e))
    logger.info(f"Trial {trial}: ub_kl={ub:.4f} ({config.num_trees} trees, mtry={config.mtry})")
    return SearchTrial(trial=trial, config=config, seed=train_seed, ub_kl=ub, true_kl=true_kl)


def random_search(
    pooled: PooledDraws,
    space: SearchSpace,
    budget: int,
    seed: int,
    holdout_fraction: float = 0.0,
    on_trial: Optional[TrialCallback] = None,
    n_jobs: Optional[int] = None,
) -> tuple[SearchTrace, Forest]:
    """
    Random hyperparameter search minimizing the KL upper bound.

    Each trial draws a configuration from `space`, trains a forest and scores
    it on the training pool (or on a held-out share of every machine's draws
    when holdout_fraction > 0). The winning forest is retrained from its
    recorded seed, which reproduces it exactly.

    Args:
        pooled: Pooled sub-posterior draws
        space: Hyperparameter grids
        budget: Number of trials
        seed: Search seed; trial t draws from the stream (seed, TUNE, t)
        holdout_fraction: Share of draws held out for scoring (0 = in-sample)
        on_trial: Optional callback (trial, forest) -> true KL, recorded in the trace
        n_jobs: Worker count for concurrent trials

    Returns:
        The full SearchTrace and the best forest

    Raises:
        ValidationError: If budget < 1 or every trial fails
    """
    if budget < 1:
        raise ValidationError("tuning budget must be at least 1")
    if holdout_fraction > 0:
        train_pool, eval_pool = holdout_split(
            pooled, holdout_fraction, derive_rng(seed, Stream.HOLDOUT)
        )
    else:
        train_pool = eval_pool = pooled

    trials = parallel_map(
        lambda t: _run_trial(t, train_pool, eval_pool, space, seed, on_trial),
        range(budget),
        n_jobs=n_jobs,
    )
    scored = [t for t in trials if t.succeeded]
    if not scored:
        raise ValidationError(f"all {budget} tuning trials failed: {trials[0].error}")
    best = min(scored, key=lambda t: (t.ub_kl, t.trial))
    trace = SearchTrace(trials=trials, best_index=best.trial)
    logger.info(f"Best trial {best.trial}: ub_kl={best.ub_kl:.4f} ({len(scored)}/{budget} succeeded)")

    forest = train_forest(train_pool, best.config, seed=best.seed, n_jobs=n_jobs)
    return trace, forest
