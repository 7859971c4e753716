"""
Combiner schemas.
"""

import enum
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class JitterKind(str, enum.Enum):
    """How augmented candidate draws are produced."""

    MULTIPLICATIVE = "multiplicative"
    ADDITIVE_GAUSSIAN = "additive-gaussian"
    NONE = "none"


class CombineMethod(str, enum.Enum):
    """Combiner names as used on the command line and in reports."""

    CLASSIFIER = "classifier"
    CONSENSUS = "consensus"
    KDE_PRODUCT = "kde-product"
    WEIERSTRASS = "weierstrass"


class JitterConfig(BaseModel):
    """Jitter augmentation of the candidate pool."""

    model_config = ConfigDict(frozen=True)

    kind: JitterKind = JitterKind.MULTIPLICATIVE
    low: float = 1.0 / 3.0
    high: float = 3.0
    copies_per_draw: int = Field(1, ge=0)
    additive_scale: float = 1.0

    @model_validator(mode="after")
    def _check_kind(self) -> "JitterConfig":
        if self.kind == JitterKind.MULTIPLICATIVE and not 0 < self.low < self.high:
            raise ValueError("multiplicative jitter needs 0 < low < high")
        if self.kind == JitterKind.ADDITIVE_GAUSSIAN and self.additive_scale <= 0:
            raise ValueError("additive jitter needs additive_scale > 0")
        return self


class CandidatePool(NamedTuple):
    """Resampling candidates and the pooled row each one came from."""

    theta: np.ndarray
    source: np.ndarray


@dataclass(frozen=True)
class CombineResult:
    """Approximate full-posterior draws plus provenance."""

    draws: np.ndarray
    method: CombineMethod
    seed: int
    config_snapshot: dict[str, Any] = field(default_factory=dict)
    weights_used: Optional[np.ndarray] = None
    seconds: float = 0.0
