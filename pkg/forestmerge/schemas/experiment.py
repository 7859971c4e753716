"""
Experiment configuration and report schemas.
"""

import enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from forestmerge.config import settings
from forestmerge.schemas.combine import CombineMethod, JitterConfig, JitterKind
from forestmerge.schemas.criterion import SearchTrace

SUPPORTED_SCHEMA_VERSION = 1


class Scenario(str, enum.Enum):
    """Experiment scenario."""

    GAUSSIAN = "gaussian"
    MIXTURE = "mixture"
    CUSTOM = "custom"


class ExperimentConfig(BaseModel):
    """
    Scenario description for one end-to-end run.

    Loaded from a flat KEY=value file; keys are the field names below.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: int = Field(SUPPORTED_SCHEMA_VERSION, description="Config format version")
    scenario: Scenario = Scenario.GAUSSIAN
    n: int = Field(10_000, ge=2, description="Data count")
    m: int = Field(5, ge=2, description="Machines")
    d: int = Field(10, ge=1, description="Parameter dimension")
    draws_per_machine: int = Field(2000, ge=10, description="N, draws per machine")
    tuning_budget: int = Field(50, ge=1, description="Random-search trials")
    rho: float = Field(0.8, gt=0.0, lt=1.0, description="AR(1) correlation of the data covariance")
    master_seed: int = 0
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    methods: tuple[CombineMethod, ...] = tuple(CombineMethod)
    output_draws: Optional[int] = Field(None, ge=1, description="M, defaults to N")

    jitter_kind: JitterKind = JitterKind.MULTIPLICATIVE
    jitter_low: float = 1.0 / 3.0
    jitter_high: float = 3.0
    jitter_copies_per_draw: int = Field(1, ge=0)
    jitter_additive_scale: float = 1.0

    weierstrass_bandwidth: Optional[float] = Field(None, gt=0.0, description="Fixed h; tuned when unset")
    weierstrass_repairings: int = Field(50, ge=0)
    weierstrass_target_ess: float = Field(0.1, gt=0.0, le=1.0, description="Tuned-h ESS as a fraction of M")
    weierstrass_shaped: bool = True
    kde_bandwidth: float = Field(1.0, gt=0.0, description="Fixed kernel bandwidth")
    kde_warmup: int = Field(1000, ge=1)
    holdout_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    record_trial_kl: bool = True

    @model_validator(mode="before")
    @classmethod
    def _default_dimension(cls, data: Any) -> Any:
        if isinstance(data, dict) and "d" not in data and data.get("scenario") == Scenario.MIXTURE:
            return {**data, "d": 1}
        return data

    @field_validator("methods", mode="before")
    @classmethod
    def _split_methods(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.schema_version != SUPPORTED_SCHEMA_VERSION:
            raise ValueError(
                f"schema_version {self.schema_version} is not supported "
                f"(expected {SUPPORTED_SCHEMA_VERSION})"
            )
        if self.n < self.m:
            raise ValueError(f"n={self.n} must be at least m={self.m}")
        if self.scenario == Scenario.MIXTURE and self.d != 1:
            raise ValueError("mixture scenario is one-dimensional; set d=1")
        if not self.methods:
            raise ValueError("methods must name at least one combiner")
        # Constructing the JitterConfig runs its own validation
        _ = self.jitter
        return self

    @property
    def jitter(self) -> JitterConfig:
        return JitterConfig(
            kind=self.jitter_kind,
            low=self.jitter_low,
            high=self.jitter_high,
            copies_per_draw=self.jitter_copies_per_draw,
            additive_scale=self.jitter_additive_scale,
        )

    @property
    def output_draw_count(self) -> int:
        return self.output_draws or self.draws_per_machine


class MethodMetrics(BaseModel):
    """Per-method outcome of an experiment."""

    method: CombineMethod
    true_kl: Optional[float] = None
    mode_count: Optional[int] = None
    mode_locations: Optional[list[float]] = None
    combine_seconds: Optional[float] = None
    error: Optional[str] = None


class ExperimentReport(BaseModel):
    """Table and correlation analogue of one run."""

    schema_version: int = SUPPORTED_SCHEMA_VERSION
    config: dict[str, Any]
    methods: dict[str, MethodMetrics]
    tuning: SearchTrace
    correlation: Optional[float] = None
    reference_modes: Optional[list[float]] = None
    gather_counts: dict[int, int] = Field(default_factory=dict)
    seeds: dict[str, int] = Field(default_factory=dict)
    artifacts: dict[str, str] = Field(default_factory=dict)

    def reproducible_dump(self) -> dict[str, Any]:
        """JSON-ready dict without wall-clock timings."""
        payload = self.model_dump(mode="json")
        for metrics in payload["methods"].values():
            metrics.pop("combine_seconds", None)
        return payload

    def timings(self) -> dict[str, Optional[float]]:
        return {name: m.combine_seconds for name, m in self.methods.items()}
