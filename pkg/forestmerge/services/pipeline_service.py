"""
End-to-end one-shot pipeline: partition, parallel sampling, a single gather,
forest tuning, combination and evaluation.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import pydantic
from dotenv import dotenv_values

from forestmerge.config import settings
from forestmerge.core.exceptions import ForestMergeError, ValidationError
from forestmerge.core.gather import OneShotChannel, parallel_map
from forestmerge.core.numerics import Stream, derive_rng, sample_moments
from forestmerge.core.storage import ArtifactStore
from forestmerge.schemas.combine import CombineMethod, CombineResult
from forestmerge.schemas.criterion import SearchTrace
from forestmerge.schemas.evaluation import DensityTrace, MomentSummary
from forestmerge.schemas.experiment import (
    ExperimentConfig,
    ExperimentReport,
    MethodMetrics,
    Scenario,
)
from forestmerge.schemas.forest import Forest, SearchSpace
from forestmerge.schemas.posterior import Dataset, Partition, PooledDraws, SubposteriorSample
from forestmerge.services.combine_service import (
    combine_classifier,
    combine_consensus,
    combine_kde_product,
    combine_weierstrass,
)
from forestmerge.services.criterion_service import TrialCallback, random_search
from forestmerge.services.evaluation_service import (
    default_grid,
    density_trace,
    find_modes,
    gaussian_kl,
    pearson_correlation,
)
from forestmerge.services.posterior_service import (
    CustomModel,
    ar1_covariance,
    custom_subposterior_target,
    gaussian_full_posterior,
    gaussian_subposterior,
    generate_gaussian_data,
    generate_mixture_data,
    mixture_full_posterior,
    mixture_log_density,
    mixture_subposterior,
    partition_rows,
    random_walk_metropolis,
    sample_gaussian,
    sample_mixture,
    stratified_partition,
)

logger = logging.getLogger(__name__)

SEED_BOUND = 2**31 - 1


def stage_seed(master_seed: int, stream: Stream, *ids: int) -> int:
    """Integer seed of one pipeline stage, derived from the master seed."""
    return int(derive_rng(master_seed, stream, *ids).integers(0, SEED_BOUND))


def method_seed(master_seed: int, method: CombineMethod) -> int:
    return stage_seed(master_seed, Stream.COMBINE, list(CombineMethod).index(method))


# Configuration


def _pydantic_message(error: pydantic.ValidationError) -> str:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "config"
    return f"{field}: {first['msg']}"


def build_config(values: Mapping[str, Any]) -> ExperimentConfig:
    """
    Validate a flat mapping into an ExperimentConfig.

    Raises:
        ValidationError: Naming the first offending field
    """
    unknown = sorted(set(values) - set(ExperimentConfig.model_fields))
    if unknown:
        raise ValidationError(f"{unknown[0]}: unknown config key")
    try:
        return ExperimentConfig(**values)
    except pydantic.ValidationError as e:
        raise ValidationError(_pydantic_message(e)) from e


def load_experiment_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> ExperimentConfig:
    """
    Load a KEY=value experiment file and apply overrides.

    Args:
        path: Config file (dotenv syntax); None means defaults only
        overrides: Values taking precedence over the file (None entries are skipped)

    Returns:
        The validated ExperimentConfig

    Raises:
        ValidationError: On a missing file, unknown key, key without value or bad value
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"{path}: config file not found")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ValidationError(f"{key.lower()}: missing value")
            if value != "":
                values[key.lower()] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(values)


# Reference posterior


@dataclass(frozen=True)
class Reference:
    """Ground truth for evaluating combiners."""

    draws: np.ndarray
    moments: Optional[MomentSummary] = None
    trace: Optional[DensityTrace] = None
    modes: Optional[np.ndarray] = None


def _correlation(trace: SearchTrace) -> Optional[float]:
    pairs = [(t.ub_kl, t.true_kl) for t in trace.trials if t.succeeded and t.true_kl is not None]
    if len(pairs) < 3:
        return None
    x, y = zip(*pairs)
    try:
        return pearson_correlation(np.asarray(x), np.asarray(y))
    except ValidationError as e:
        logger.warning(f"Correlation skipped: {e}")
        return None


class PipelineService:
    """
    Service running the one-shot pipeline stages of one experiment.

    Each stage is exposed on its own so the CLI subcommands reproduce the
    in-pipeline results from files.
    """

    def __init__(self, cfg: ExperimentConfig, store: Optional[ArtifactStore] = None):
        """
        Initialize the pipeline service.

        Args:
            cfg: Experiment configuration
            store: Artifact store (default: cfg.output_dir)
        """
        self.cfg = cfg
        self.store = store or ArtifactStore(cfg.output_dir)
        self.channel = OneShotChannel(cfg.m)

    # Data and sampling

    def generate_data(self) -> Dataset:
        """Synthetic data of a built-in scenario."""
        cfg = self.cfg
        rng = derive_rng(cfg.master_seed, Stream.DATA)
        if cfg.scenario == Scenario.GAUSSIAN:
            return generate_gaussian_data(cfg.n, cfg.d, np.zeros(cfg.d), cfg.rho, rng)
        if cfg.scenario == Scenario.MIXTURE:
            return generate_mixture_data(cfg.n, rng)
        raise ValidationError("scenario: custom runs take their dataset from the caller")

    def partition(self, dataset: Dataset) -> Partition:
        """Split rows over machines; labeled data is dealt per label."""
        rng = derive_rng(self.cfg.master_seed, Stream.PARTITION)
        if self.cfg.scenario == Scenario.MIXTURE:
            return stratified_partition(dataset.labels, self.cfg.m, rng)
        return partition_rows(dataset.n, self.cfg.m, rng)

    def sample_machine(
        self, data_part: Dataset, machine: int, model: Optional[CustomModel] = None
    ) -> SubposteriorSample:
        """
        Draw N sub-posterior samples on one machine.

        Args:
            data_part: The machine's rows
            machine: 1-based machine id (selects the random stream)
            model: User model, required for the custom scenario
        """
        cfg = self.cfg
        rng = derive_rng(cfg.master_seed, Stream.SAMPLE, machine)
        N = cfg.draws_per_machine
        if cfg.scenario == Scenario.GAUSSIAN:
            posterior = gaussian_subposterior(data_part, ar1_covariance(cfg.d, cfg.rho))
            return sample_gaussian(posterior, N, rng)
        if cfg.scenario == Scenario.MIXTURE:
            return sample_mixture(mixture_subposterior(data_part), N, rng)
        if model is None:
            raise ValidationError("scenario: custom runs need a model")
        target = custom_subposterior_target(model, data_part, cfg.m)
        result = random_walk_metropolis(target, model.initial_point, N, model.step_scale, rng)
        logger.info(f"Machine {machine}: acceptance {result.acceptance_rate:.3f}")
        return SubposteriorSample(draws=result.draws, log_densities=result.log_densities)

    def sample_and_gather(
        self, dataset: Dataset, partition: Partition, model: Optional[CustomModel] = None
    ) -> PooledDraws:
        """
        Run every machine concurrently; each reports once through the service's channel.

        Returns:
            The pooled draws; `self.channel.message_counts` holds the message tally

        Raises:
            ValidationError: If the partition's machine count differs from the config
        """
        cfg = self.cfg
        if partition.m != cfg.m:
            raise ValidationError(f"m: partition has {partition.m} machines, config says {cfg.m}")

        def run_machine(machine: int) -> None:
            part = dataset.subset(partition.index_sets[machine - 1])
            self.channel.send(machine, self.sample_machine(part, machine, model))

        parallel_map(run_machine, range(1, cfg.m + 1))
        if cfg.scenario == Scenario.CUSTOM:
            logger.warning(
                "Custom model log densities are unnormalized; pooled weights are only "
                "comparable up to per-machine constants"
            )
        return self.channel.gather()

    def build_reference(self, dataset: Dataset) -> Optional[Reference]:
        """
        Exact full-posterior draws (and for the mixture the exact density trace).

        Returns None for the custom scenario.
        """
        cfg = self.cfg
        rng = derive_rng(cfg.master_seed, Stream.REFERENCE)
        count = cfg.output_draw_count
        if cfg.scenario == Scenario.GAUSSIAN:
            full = gaussian_full_posterior(dataset, ar1_covariance(cfg.d, cfg.rho))
            draws = sample_gaussian(full, count, rng).draws
            return Reference(draws=draws, moments=sample_moments(draws))
        if cfg.scenario == Scenario.MIXTURE:
            full = mixture_full_posterior(dataset)
            draws = sample_mixture(full, count, rng).draws
            grid = default_grid(draws[:, 0], settings.MIXTURE_TRACE_BANDWIDTH)
            trace = DensityTrace(grid=grid, density=np.exp(mixture_log_density(full, grid)))
            return Reference(draws=draws, trace=trace, modes=find_modes(trace))
        return None

    # Tuning and combination

    def tune(
        self,
        pooled: PooledDraws,
        on_trial: Optional[TrialCallback] = None,
        space: Optional[SearchSpace] = None,
    ) -> tuple[SearchTrace, Forest]:
        """Random search over the default grids with the run's tuning seed."""
        return random_search(
            pooled,
            space or SearchSpace(),
            self.cfg.tuning_budget,
            seed=stage_seed(self.cfg.master_seed, Stream.TUNE),
            holdout_fraction=self.cfg.holdout_fraction,
            on_trial=on_trial,
        )

    def combine(
        self,
        method: CombineMethod,
        pooled: PooledDraws,
        forest: Optional[Forest] = None,
        seed: Optional[int] = None,
    ) -> CombineResult:
        """
        Run one combiner with the run's settings; M defaults to the pool's N.

        Raises:
            ValidationError: If the classifier is requested without a forest
        """
        cfg = self.cfg
        seed = method_seed(cfg.master_seed, method) if seed is None else seed
        per_machine = pooled.per_machine()
        M = cfg.output_draws or pooled.draws_per_machine
        if method == CombineMethod.CLASSIFIER:
            if forest is None:
                raise ValidationError("forest: the classifier combiner needs a trained forest")
            return combine_classifier(pooled, forest, cfg.jitter, M, seed)
        if method == CombineMethod.CONSENSUS:
            return combine_consensus(per_machine, seed)
        if method == CombineMethod.WEIERSTRASS:
            return combine_weierstrass(
                per_machine,
                cfg.weierstrass_bandwidth,
                M,
                seed,
                repairings=cfg.weierstrass_repairings,
                target_ess=cfg.weierstrass_target_ess,
                shaped=cfg.weierstrass_shaped,
            )
        return combine_kde_product(per_machine, cfg.kde_bandwidth, M, seed, cfg.kde_warmup)

    def score(self, draws: np.ndarray, reference: Optional[Reference]) -> dict[str, Any]:
        """True KL (Gaussian) or mode count and locations (mixture) of combined draws."""
        if reference is None:
            return {}
        if reference.moments is not None:
            return {"true_kl": gaussian_kl(reference.moments, sample_moments(draws))}
        trace = density_trace(
            draws[:, 0], settings.MIXTURE_TRACE_BANDWIDTH, grid=reference.trace.grid
        )
        modes = find_modes(trace)
        return {"mode_count": int(modes.size), "mode_locations": [float(x) for x in modes]}

    def _trial_kl_callback(self, pooled: PooledDraws, reference: Reference) -> TrialCallback:
        cfg = self.cfg
        M = cfg.output_draws or pooled.draws_per_machine

        def true_kl(trial: int, forest: Forest) -> Optional[float]:
            seed = stage_seed(cfg.master_seed, Stream.COMBINE, len(CombineMethod), trial)
            result = combine_classifier(pooled, forest, cfg.jitter, M, seed, n_jobs=1)
            return gaussian_kl(reference.moments, sample_moments(result.draws))

        return true_kl

    def run(
        self, model: Optional[CustomModel] = None, dataset: Optional[Dataset] = None
    ) -> ExperimentReport:
        """
        Execute the whole experiment and write its artifacts.

        Args:
            model: User model (custom scenario)
            dataset: User data (custom scenario); generated otherwise

        Returns:
            ExperimentReport with one entry per requested method

        Raises:
            ValidationError: On bad inputs before the combination stage
        """
        cfg, store = self.cfg, self.store
        if cfg.scenario == Scenario.CUSTOM and (model is None or dataset is None):
            raise ValidationError("scenario: custom runs need a model and a dataset")
        dataset = dataset if dataset is not None else self.generate_data()

        partition = self.partition(dataset)
        logger.info(f"Partitioned {dataset.n} rows over {cfg.m} machines: sizes {partition.sizes}")
        pooled = self.sample_and_gather(dataset, partition, model)
        reference = self.build_reference(dataset)

        on_trial = None
        if cfg.record_trial_kl and reference is not None and reference.moments is not None:
            on_trial = self._trial_kl_callback(pooled, reference)
        trace, forest = self.tune(pooled, on_trial)

        artifacts = {
            "dataset": store.write_dataset(dataset).name,
            "partition": store.write_partition(partition, dataset.n).name,
            "pooled": store.write_pooled(pooled).name,
            "tuning": store.write_trace(trace).name,
            "forest": store.write_forest(forest).name,
        }
        if reference is not None:
            artifacts["reference"] = store.write_draws(reference.draws, "reference.csv").name
            if reference.trace is not None:
                artifacts["reference_density"] = store.write_density(
                    reference.trace, "reference_density.csv"
                ).name

        seeds = {
            "master": cfg.master_seed,
            "tuning": stage_seed(cfg.master_seed, Stream.TUNE),
            "forest": trace.best.seed,
        }
        methods: dict[str, MethodMetrics] = {}
        for method in cfg.methods:
            seeds[method.value] = method_seed(cfg.master_seed, method)
            try:
                result = self.combine(method, pooled, forest)
                metrics = MethodMetrics(
                    method=method, combine_seconds=result.seconds, **self.score(result.draws, reference)
                )
                artifacts[method.value] = store.write_combine(result).name
                if reference is not None and reference.trace is not None:
                    artifacts[f"{method.value}_density"] = store.write_density(
                        density_trace(
                            result.draws[:, 0], settings.MIXTURE_TRACE_BANDWIDTH, grid=reference.trace.grid
                        ),
                        f"{method.value}_density.csv",
                    ).name
            except ForestMergeError as e:
                logger.error(f"Method {method.value} failed: {e}")
                metrics = MethodMetrics(method=method, error=str(e))
            logger.info(f"Method {method.value}: {metrics.model_dump(exclude_none=True)}")
            methods[method.value] = metrics

        report = ExperimentReport(
            config=cfg.model_dump(mode="json"),
            methods=methods,
            tuning=trace,
            correlation=_correlation(trace) if cfg.tuning_budget >= 3 else None,
            reference_modes=(
                [float(x) for x in reference.modes]
                if reference is not None and reference.modes is not None
                else None
            ),
            gather_counts=self.channel.message_counts,
            seeds=seeds,
            artifacts=artifacts,
        )
        store.write_report(report)
        return report


def run_pipeline(
    cfg: ExperimentConfig,
    model: Optional[CustomModel] = None,
    dataset: Optional[Dataset] = None,
    store: Optional[ArtifactStore] = None,
) -> ExperimentReport:
    """Run a whole experiment through a fresh PipelineService."""
    return PipelineService(cfg, store).run(model, dataset)
