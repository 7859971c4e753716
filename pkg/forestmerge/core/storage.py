"""
Artifact store.

Reads and writes every on-disk format of the pipeline (CSV via pandas, JSON
documents) under one output directory.
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from forestmerge.core.exceptions import ValidationError
from forestmerge.schemas.combine import CombineResult
from forestmerge.schemas.criterion import SearchTrace, SearchTrial
from forestmerge.schemas.evaluation import DensityTrace
from forestmerge.schemas.experiment import ExperimentReport
from forestmerge.schemas.forest import Forest, ForestConfig
from forestmerge.schemas.posterior import Dataset, Partition, PooledDraws
from forestmerge.services.forest_service import forest_from_dict, forest_to_dict

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
TRACE_COLUMNS = [
    "trial",
    "fraction",
    "num_trees",
    "min_node_size",
    "mtry",
    "replacement",
    "weight_adjustment",
    "ub_kl",
    "seed",
]


def _theta_columns(prefix: str, d: int) -> list[str]:
    return [f"{prefix}_{j}" for j in range(1, d + 1)]


def _numbered_columns(frame: pd.DataFrame, prefix: str) -> list[str]:
    columns = []
    j = 1
    while f"{prefix}_{j}" in frame.columns:
        columns.append(f"{prefix}_{j}")
        j += 1
    if not columns:
        raise ValidationError(f"{prefix}_1: missing column")
    return columns


class ArtifactStore:
    """
    File-system store for pipeline inputs and outputs.

    Every reader validates the column set and raises ValidationError naming the
    offending column or field.
    """

    def __init__(self, root: Union[str, Path]):
        """
        Initialize the store.

        Args:
            root: Output directory, created on first write
        """
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def _target(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return self.path(name)

    def _read_csv(self, path: Union[str, Path], required: list[str]) -> pd.DataFrame:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"{path}: file not found")
        try:
            frame = pd.read_csv(path, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise ValidationError(f"{path}: malformed CSV ({e})") from e
        for column in required:
            if column not in frame.columns:
                raise ValidationError(f"{column}: missing column in {path.name}")
        return frame

    @staticmethod
    def _numeric(frame: pd.DataFrame, columns: list[str], dtype: Any = np.float64) -> np.ndarray:
        for column in columns:
            if not pd.api.types.is_numeric_dtype(frame[column]):
                raise ValidationError(f"{column}: non-numeric value")
        return frame[columns].to_numpy(dtype=dtype)

    # JSON documents

    def write_json(self, name: str, payload: dict[str, Any]) -> Path:
        target = self._target(name)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target

    def read_json(self, path: Union[str, Path]) -> dict[str, Any]:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"{path}: file not found")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: malformed JSON ({e.msg})") from e

    # Data and partitions

    def write_dataset(self, dataset: Dataset, name: str = "dataset.csv") -> Path:
        frame = pd.DataFrame(dataset.rows, columns=_theta_columns("x", dataset.width))
        frame.insert(0, "label", dataset.labels if dataset.labels is not None else np.nan)
        frame.insert(0, "row", np.arange(dataset.n))
        target = self._target(name)
        frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
        return target

    def read_dataset(self, path: Union[str, Path]) -> Dataset:
        frame = self._read_csv(path, ["row", "label"])
        frame = frame.sort_values("row")
        rows = self._numeric(frame, _numbered_columns(frame, "x"))
        labels = None
        if frame["label"].notna().any():
            if frame["label"].isna().any():
                raise ValidationError("label: some rows are unlabeled")
            labels = self._numeric(frame, ["label"], np.int64).ravel()
        return Dataset(rows=rows, labels=labels)

    def write_partition(self, partition: Partition, n: int, name: str = "partition.csv") -> Path:
        frame = pd.DataFrame({"row": np.arange(n), "machine": partition.machine_of_rows(n)})
        target = self._target(name)
        frame.to_csv(target, index=False)
        return target

    def read_partition(self, path: Union[str, Path]) -> Partition:
        frame = self._read_csv(path, ["row", "machine"])
        rows = self._numeric(frame, ["row"], np.int64).ravel()
        machines = self._numeric(frame, ["machine"], np.int64).ravel()
        if machines.min() < 1:
            raise ValidationError("machine: labels must start at 1")
        m = int(machines.max())
        return Partition(index_sets=tuple(np.sort(rows[machines == i]) for i in range(1, m + 1)))

    # Pooled draws

    def write_pooled(self, pooled: PooledDraws, name: str = "pooled.csv") -> Path:
        frame = pd.DataFrame(pooled.theta, columns=_theta_columns("theta", pooled.dimension))
        frame.insert(0, "iter", pooled.iteration())
        frame.insert(0, "machine", pooled.machine)
        frame["log_density"] = pooled.log_density
        target = self._target(name)
        frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
        return target

    def read_pooled(self, path: Union[str, Path]) -> PooledDraws:
        frame = self._read_csv(path, ["machine", "iter", "log_density"])
        frame = frame.sort_values(["machine", "iter"], kind="stable")
        theta = self._numeric(frame, _numbered_columns(frame, "theta"))
        return PooledDraws(
            theta=theta,
            machine=self._numeric(frame, ["machine"], np.int64).ravel(),
            log_density=self._numeric(frame, ["log_density"]).ravel(),
        )

    # Tuning trace

    def write_trace(self, trace: SearchTrace, name: str = "tuning.csv") -> Path:
        records = []
        for t in trace.trials:
            records.append(
                {
                    "trial": t.trial,
                    "fraction": t.config.fraction,
                    "num_trees": t.config.num_trees,
                    "min_node_size": t.config.min_node_size,
                    "mtry": t.config.mtry,
                    "replacement": t.config.replacement,
                    "weight_adjustment": t.config.weight_adjustment,
                    "ub_kl": t.ub_kl,
                    "seed": t.seed,
                }
            )
        target = self._target(name)
        pd.DataFrame.from_records(records, columns=TRACE_COLUMNS).to_csv(
            target, index=False, float_format=FLOAT_FORMAT
        )
        return target

    def read_trace(self, path: Union[str, Path]) -> SearchTrace:
        frame = self._read_csv(path, TRACE_COLUMNS)
        trials = []
        for record in frame.to_dict(orient="records"):
            ub = record["ub_kl"]
            config = ForestConfig(
                fraction=record["fraction"],
                num_trees=int(record["num_trees"]),
                min_node_size=int(record["min_node_size"]),
                mtry=int(record["mtry"]),
                replacement=bool(record["replacement"]),
                weight_adjustment=bool(record["weight_adjustment"]),
                allow_wide_ranges=True,
            )
            trials.append(
                SearchTrial(
                    trial=int(record["trial"]),
                    config=config,
                    seed=int(record["seed"]),
                    ub_kl=None if pd.isna(ub) else float(ub),
                    error=None if not pd.isna(ub) else "failed",
                )
            )
        scored = [t for t in trials if t.succeeded]
        if not scored:
            raise ValidationError("ub_kl: no successful trial in trace")
        best = min(scored, key=lambda t: (t.ub_kl, t.trial))
        return SearchTrace(trials=trials, best_index=trials.index(best))

    # Forests

    def write_forest(self, forest: Forest, name: str = "best_forest.json") -> Path:
        return self.write_json(name, forest_to_dict(forest))

    def read_forest(self, path: Union[str, Path]) -> Forest:
        return forest_from_dict(self.read_json(path))

    # Combiner output

    def write_draws(self, draws: np.ndarray, name: str) -> Path:
        """Write a draw matrix as `iter,theta_1..d`."""
        frame = pd.DataFrame(draws, columns=_theta_columns("theta", draws.shape[1]))
        frame.insert(0, "iter", np.arange(1, draws.shape[0] + 1))
        target = self._target(name)
        frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
        return target

    def write_combine(self, result: CombineResult, name: Optional[str] = None) -> Path:
        """Write `<method>.csv` and its `<method>.json` sidecar."""
        stem = name or result.method.value
        target = self.write_draws(result.draws, f"{stem}.csv")
        self.write_json(
            f"{stem}.json",
            {
                "method": result.method.value,
                "seed": result.seed,
                "config": result.config_snapshot,
                "seconds": result.seconds,
            },
        )
        return target

    def read_draws(self, path: Union[str, Path]) -> np.ndarray:
        frame = self._read_csv(path, ["iter"])
        frame = frame.sort_values("iter")
        return self._numeric(frame, _numbered_columns(frame, "theta"))

    # Density traces

    def write_density(self, trace: DensityTrace, name: str) -> Path:
        target = self._target(name)
        pd.DataFrame({"grid": trace.grid, "density": trace.density}).to_csv(
            target, index=False, float_format=FLOAT_FORMAT
        )
        return target

    def read_density(self, path: Union[str, Path]) -> DensityTrace:
        frame = self._read_csv(path, ["grid", "density"])
        values = self._numeric(frame, ["grid", "density"])
        return DensityTrace(grid=values[:, 0], density=values[:, 1])

    # Reports

    def write_report(self, report: ExperimentReport) -> Path:
        """Write report.json (reproducible) and timings.json (wall clock)."""
        self.write_json("timings.json", {"combine_seconds": report.timings()})
        target = self.write_json("report.json", report.reproducible_dump())
        logger.info(f"Report written to {target}")
        return target
