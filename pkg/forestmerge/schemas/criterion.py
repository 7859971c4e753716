"""
Selection-criterion schemas: per-forest reports and the random-search trace.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from forestmerge.schemas.forest import ForestConfig


@dataclass(frozen=True)
class CriterionReport:
    """
    Reconstructable-area probabilities, resampling weights and the KL upper
    bound for one trained forest.
    """

    recon_prob: np.ndarray
    f_weights: np.ndarray
    w_sub: np.ndarray
    log_c_f: float
    ub_kl: float
    config: ForestConfig


class TheoremCheck(NamedTuple):
    """Brute-force comparison of the exact discrete KL against H times the bound."""

    kl: float
    bound: float
    H: float
    holds: bool


class SearchTrial(BaseModel):
    """One random-search trial."""

    trial: int
    config: ForestConfig
    seed: int
    ub_kl: Optional[float] = None
    true_kl: Optional[float] = None
    error: Optional[str] = None

    @property
    def succeeded(self) -> bool:
        return self.ub_kl is not None


class SearchTrace(BaseModel):
    """All trials of a random search and the index of the smallest bound."""

    trials: list[SearchTrial] = Field(default_factory=list)
    best_index: int

    @model_validator(mode="after")
    def _check_best(self) -> "SearchTrace":
        scored = [t for t in self.trials if t.succeeded]
        if not scored:
            raise ValueError("trace has no successful trial")
        best = self.trials[self.best_index]
        if not best.succeeded or any(t.ub_kl < best.ub_kl for t in scored):
            raise ValueError("best_index does not attain the minimum ub_kl")
        return self

    @property
    def best(self) -> SearchTrial:
        return self.trials[self.best_index]
