from __future__ import annotations

import enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ttcompute.core.objects import SampleRecord, SelectionStrategy

TOP3_CANDIDATES = 3


class Regime(str, enum.Enum):
    HIGH_VARIANCE = "high_variance"
    LOW_VARIANCE = "low_variance"


class SelectionResult(BaseModel):
    """The pick of one strategy on one task's sample set.

    ``chosen`` is ``None`` when the set has no correct sample; that counts as
    a failure in every aggregate.
    """

    model_config = ConfigDict(frozen=True)

    strategy: SelectionStrategy
    task_id: int
    seed: int
    chosen: Optional[SampleRecord] = None
    extra_evals_used: int = Field(default=0, ge=0)
    fast1: bool = False
    speedup: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> SelectionResult:
        if self.chosen is None:
            if self.fast1 or self.speedup != 0:
                raise ValueError("a failed selection has no speedup")
        elif not self.chosen.correct:
            raise ValueError("selected sample must be correct")
        limit = (
            TOP3_CANDIDATES
            if self.strategy == SelectionStrategy.SURPRISAL_GUIDED_TOP3
            else 0
        )
        if self.extra_evals_used > limit:
            raise ValueError(
                f"{self.strategy.value} may use at most {limit} extra evaluations"
            )
        return self

    @property
    def chosen_sample_index(self) -> Optional[int]:
        return self.chosen.sample_index if self.chosen is not None else None


class RegimeLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: int
    logprob_std: float = Field(ge=0)
    threshold: float
    label: Regime

    @model_validator(mode="after")
    def _check_label(self) -> RegimeLabel:
        high = self.logprob_std > self.threshold
        if high != (self.label == Regime.HIGH_VARIANCE):
            raise ValueError("label disagrees with logprob_std and threshold")
        return self


class QuartileBucket(BaseModel):
    """Correct samples in one surprisal quartile; Q1 is the most surprising."""

    model_config = ConfigDict(frozen=True)

    quartile: int = Field(ge=1, le=4)
    size: int = Field(ge=1)
    fast1_rate: float = Field(ge=0, le=1)
    mean_speedup: float = Field(ge=0)
    median_token_count: float = Field(ge=0)
    logprob_low: float
    logprob_high: float


class StrategySummary(BaseModel):
    """Aggregate of one strategy over tasks, averaged across seeds."""

    model_config = ConfigDict(frozen=True)

    strategy: SelectionStrategy
    fast1: float = Field(ge=0, le=1)
    fast1_std: float = Field(ge=0)
    mean_speedup: float = Field(ge=0)
    failures: int = Field(ge=0)
    extra_evals: int = Field(ge=0)
    units: int = Field(ge=0)
