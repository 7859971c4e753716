"""
Command-line entry point.

    forestmerge experiment gaussian --seed 7 --out runs/a
    forestmerge partition mixture --out runs/b
    forestmerge sample --scenario mixture --out runs/b
    forestmerge tune --budget 50 --out runs/b
    forestmerge combine --method classifier --forest runs/b/best_forest.json --out runs/b
    forestmerge evaluate --draws runs/b/classifier.csv --reference runs/b/reference.csv

Exit codes: 0 on success, 1 on a validation error, 2 on a numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import pydantic

from forestmerge import __version__
from forestmerge.config import settings
from forestmerge.core.exceptions import NumericalError, ValidationError
from forestmerge.core.numerics import sample_moments
from forestmerge.core.storage import ArtifactStore
from forestmerge.schemas.combine import CombineMethod
from forestmerge.schemas.experiment import ExperimentConfig, Scenario
from forestmerge.services.evaluation_service import count_modes, density_trace, find_modes, gaussian_kl
from forestmerge.services.pipeline_service import (
    PipelineService,
    build_config,
    load_experiment_config,
)

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as validation errors (exit 1)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ValidationError(message)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master seed")
    common.add_argument("--config", type=Path, default=None, help="KEY=value experiment file")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--log-level", default=None, help="Logging level (default from settings)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="forestmerge", description="One-shot parallel MCMC with forest-based combination")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    experiment = sub.add_parser("experiment", parents=[common], help="Run a full experiment")
    experiment.add_argument("scenario", choices=[Scenario.GAUSSIAN.value, Scenario.MIXTURE.value])
    experiment.add_argument("--budget", type=int, default=None, help="Tuning trials")
    experiment.add_argument("--methods", default=None, help="Comma-separated combiners")

    partition = sub.add_parser("partition", parents=[common], help="Generate data and split it")
    partition.add_argument("scenario", choices=[Scenario.GAUSSIAN.value, Scenario.MIXTURE.value])

    sample = sub.add_parser("sample", parents=[common], help="Sample every machine and pool the draws")
    sample.add_argument("--scenario", choices=[Scenario.GAUSSIAN.value, Scenario.MIXTURE.value], default=None)
    sample.add_argument("--dataset", type=Path, default=None)
    sample.add_argument("--partition", type=Path, default=None)

    tune_cmd = sub.add_parser("tune", parents=[common], help="Random search over forest settings")
    tune_cmd.add_argument("--pooled", type=Path, default=None)
    tune_cmd.add_argument("--budget", type=int, default=None)

    combine = sub.add_parser("combine", parents=[common], help="Combine pooled draws")
    combine.add_argument("--method", required=True, choices=[m.value for m in CombineMethod])
    combine.add_argument("--pooled", type=Path, default=None)
    combine.add_argument("--forest", type=Path, default=None)

    evaluate = sub.add_parser("evaluate", parents=[common], help="Score draws against a reference")
    evaluate.add_argument("--draws", type=Path, required=True)
    evaluate.add_argument("--reference", type=Path, required=True)
    evaluate.add_argument("--bandwidth", type=float, default=None, help="Trace bandwidth (1-d draws)")
    return parser


def _config(args: argparse.Namespace, **extra: Any) -> ExperimentConfig:
    overrides = {
        "master_seed": args.seed,
        "output_dir": str(args.out) if args.out is not None else None,
        **extra,
    }
    return load_experiment_config(args.config, overrides)


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_experiment(args: argparse.Namespace) -> None:
    cfg = _config(args, scenario=args.scenario, tuning_budget=args.budget, methods=args.methods)
    report = PipelineService(cfg).run()
    _emit(
        {
            "output_dir": cfg.output_dir,
            "correlation": report.correlation,
            "methods": {k: v.model_dump(exclude_none=True, mode="json") for k, v in report.methods.items()},
        }
    )


def cmd_partition(args: argparse.Namespace) -> None:
    service = PipelineService(_config(args, scenario=args.scenario))
    store = service.store
    dataset = service.generate_data()
    partition = service.partition(dataset)
    store.write_dataset(dataset)
    store.write_partition(partition, dataset.n)
    reference = service.build_reference(dataset)
    if reference is not None:
        store.write_draws(reference.draws, "reference.csv")
    _emit({"rows": dataset.n, "sizes": partition.sizes})


def cmd_sample(args: argparse.Namespace) -> None:
    cfg = _config(args, scenario=args.scenario)
    store = ArtifactStore(cfg.output_dir)
    dataset = store.read_dataset(args.dataset or store.path("dataset.csv"))
    partition = store.read_partition(args.partition or store.path("partition.csv"))
    cfg = build_config({**cfg.model_dump(), "n": dataset.n, "m": partition.m, "d": dataset.width})
    service = PipelineService(cfg, store)
    pooled = service.sample_and_gather(dataset, partition)
    store.write_pooled(pooled)
    _emit({"draws": pooled.size, "messages": service.channel.message_counts})


def cmd_tune(args: argparse.Namespace) -> None:
    service = PipelineService(_config(args, tuning_budget=args.budget))
    store = service.store
    pooled = store.read_pooled(args.pooled or store.path("pooled.csv"))
    trace, forest = service.tune(pooled)
    store.write_trace(trace)
    store.write_forest(forest)
    _emit({"best_trial": trace.best_index, "ub_kl": trace.best.ub_kl})


def cmd_combine(args: argparse.Namespace) -> None:
    service = PipelineService(_config(args))
    store = service.store
    pooled = store.read_pooled(args.pooled or store.path("pooled.csv"))
    method = CombineMethod(args.method)
    if method == CombineMethod.CONSENSUS and pooled.m < 2:
        raise ValidationError(f"consensus needs m >= 2 machines, pool has m={pooled.m}")
    forest = None
    if method == CombineMethod.CLASSIFIER:
        if args.forest is None:
            raise ValidationError("--forest: required for the classifier method")
        forest = store.read_forest(args.forest)
    result = service.combine(method, pooled, forest)
    target = store.write_combine(result)
    _emit({"method": method.value, "draws": int(result.draws.shape[0]), "file": str(target)})


def cmd_evaluate(args: argparse.Namespace) -> None:
    store = ArtifactStore(args.out or Path(settings.OUTPUT_DIR))
    draws = store.read_draws(args.draws)
    reference = store.read_draws(args.reference)
    payload: dict[str, Any] = {
        "true_kl": gaussian_kl(sample_moments(reference), sample_moments(draws))
    }
    if draws.shape[1] == 1:
        bandwidth = args.bandwidth or settings.MIXTURE_TRACE_BANDWIDTH
        trace = density_trace(draws[:, 0], bandwidth)
        payload["mode_count"] = count_modes(trace)
        payload["mode_locations"] = [float(x) for x in find_modes(trace)]
    _emit(payload)


COMMANDS = {
    "experiment": cmd_experiment,
    "partition": cmd_partition,
    "sample": cmd_sample,
    "tune": cmd_tune,
    "combine": cmd_combine,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return the exit code."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=(args.log_level or settings.LOG_LEVEL).upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        COMMANDS[args.command](args)
    except (ValidationError, pydantic.ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
