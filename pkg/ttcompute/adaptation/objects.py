from __future__ import annotations

import enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ttcompute.core.objects import CheckpointRef


class SdpoVariant(str, enum.Enum):
    FEEDBACK = "feedback"
    PROMPT_ONLY = "prompt_only"


class TrajectoryStep(BaseModel):
    """Score of one checkpoint along an adaptation run.

    ``aggregate_fast1`` is the fast_1 rate of the rollouts drawn from
    ``checkpoint`` at this step.
    """

    model_config = ConfigDict(frozen=True)

    step: int = Field(ge=0)
    checkpoint: CheckpointRef
    cumulative_rollouts: int = Field(ge=0)
    aggregate_fast1: float = Field(ge=0, le=1)
    per_task_fast1: Dict[int, float] = Field(default_factory=dict)
    failed_rollouts: int = Field(default=0, ge=0)


class BudgetLedger(BaseModel):
    """Compute consumed by a campaign arm; ledgers add up with ``+``."""

    model_config = ConfigDict(frozen=True)

    rollouts: int = Field(default=0, ge=0)
    student_tokens: int = Field(default=0, ge=0)
    teacher_tokens: int = Field(default=0, ge=0)
    extra_timing_evals: int = Field(default=0, ge=0)
    wall_clock: float = Field(default=0.0, ge=0)

    @property
    def total_tokens(self) -> int:
        return self.student_tokens + self.teacher_tokens

    def __add__(self, other: BudgetLedger) -> BudgetLedger:
        return BudgetLedger(
            rollouts=self.rollouts + other.rollouts,
            student_tokens=self.student_tokens + other.student_tokens,
            teacher_tokens=self.teacher_tokens + other.teacher_tokens,
            extra_timing_evals=self.extra_timing_evals + other.extra_timing_evals,
            wall_clock=self.wall_clock + other.wall_clock,
        )


class SdpoAdvantages(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta: float
    per_token: List[float] = Field(min_length=1)
    variant: SdpoVariant = SdpoVariant.FEEDBACK

    @property
    def total(self) -> float:
        return float(sum(self.per_token))


class BoaResult(BaseModel):
    """An adaptation run and the checkpoint Best-of-Adaptation picked."""

    model_config = ConfigDict(frozen=True)

    trajectory: List[TrajectoryStep] = Field(min_length=1)
    selected: TrajectoryStep
    ledger: BudgetLedger
    stopped_early: bool = False

    @model_validator(mode="after")
    def _check_trajectory(self) -> BoaResult:
        steps = [row.step for row in self.trajectory]
        if steps != list(range(len(steps))):
            raise ValueError("trajectory steps must run 0, 1, 2, ...")
        totals = [row.cumulative_rollouts for row in self.trajectory]
        if any(b <= a for a, b in zip(totals, totals[1:])):
            raise ValueError("cumulative rollouts must strictly increase")
        return self

    @property
    def scores(self) -> List[float]:
        return [row.aggregate_fast1 for row in self.trajectory]


class BudgetCheck(BaseModel):
    """Outcome of comparing two plans for equal compute."""

    model_config = ConfigDict(frozen=True)

    ok: bool
    violations: List[str] = Field(default_factory=list)
    delta: int = 0


class TransferReport(BaseModel):
    """fast_1 of an adapted checkpoint on tasks it was not adapted on."""

    model_config = ConfigDict(frozen=True)

    checkpoint_id: str
    adapted_on: List[int]
    eval_tasks: List[int]
    K: int = Field(ge=1)
    per_task_fast1: Dict[int, float]
    aggregate_fast1: float = Field(ge=0, le=1)
    baseline_id: Optional[str] = None
    baseline_per_task_fast1: Optional[Dict[int, float]] = None
    baseline_aggregate_fast1: Optional[float] = None


class CoverageBand(str, enum.Enum):
    COVERED = "covered"
    SPARSE = "sparse"


class TaskDeficit(BaseModel):
    """Best-of-Adaptation against Best-of-N on one task."""

    model_config = ConfigDict(frozen=True)

    task_id: int
    base_fast1: float = Field(ge=0, le=1)
    boa_fast1: float = Field(ge=0, le=1)
    band: CoverageBand

    @property
    def deficit(self) -> float:
        return self.boa_fast1 - self.base_fast1


class DeficitReport(BaseModel):
    """Per-task BoA deficits split by the Best-of-N coverage of each task.

    A task is ``covered`` when its base fast_1 rate exceeds ``threshold``.
    """

    model_config = ConfigDict(frozen=True)

    threshold: float = Field(ge=0, le=1)
    runs: int = Field(ge=1)
    tasks: List[TaskDeficit] = Field(min_length=1)

    def mean_deficit(self, band: CoverageBand) -> Optional[float]:
        deficits = [t.deficit for t in self.tasks if t.band == band]
        return sum(deficits) / len(deficits) if deficits else None
