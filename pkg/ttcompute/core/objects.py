from __future__ import annotations

import enum
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

RECORD_FIELDS = (
    "task_id",
    "seed",
    "sample_index",
    "code",
    "token_count",
    "total_logprob",
    "compiled",
    "correct",
    "speedup",
    "runtime",
    "error_trace",
    "trials",
)


class Split(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class SubsetTag(str, enum.Enum):
    SUBSET1 = "subset1"
    SUBSET2 = "subset2"
    EXTENDED = "extended"


class BackendKind(str, enum.Enum):
    REMOTE = "remote"
    SYNTHETIC = "synthetic"


class SelectionStrategy(str, enum.Enum):
    """Rules for picking one sample out of a task's Best-of-N set."""

    ORACLE_BEST_CORRECT = "oracle_best_correct"
    RANDOM_CORRECT = "random_correct"
    CONFIDENCE_GUIDED = "confidence_guided"
    SURPRISAL_GUIDED = "surprisal_guided"
    SURPRISAL_GUIDED_TOP3 = "surprisal_guided_top3"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class TaskSpec(_Frozen):
    """One benchmark task.

    Attributes:
        task_id: Benchmark index.
        split: Which split of the benchmark the task comes from.
        subset_tag: Named subset the task belongs to, if any.
        baseline_time: Reference implementation runtime in milliseconds.
    """

    task_id: int
    split: Split = Split.EVAL
    subset_tag: Optional[SubsetTag] = None
    baseline_time: float = Field(default=1.0, gt=0)


class EvalOutcome(_Frozen):
    """Result of compiling, checking and timing one candidate.

    Attributes:
        compiled: Candidate compiled.
        correct: Candidate passed the functional equivalence checks.
        speedup: ``baseline_time / kernel_time``; zero unless correct.
        runtime: Median kernel time in milliseconds; zero unless timed.
        error_trace: Compiler or runtime error, if any.
        trials: Timing trials the median was taken over.
    """

    compiled: bool
    correct: bool
    speedup: float = Field(default=0.0, ge=0)
    runtime: float = Field(default=0.0, ge=0)
    error_trace: Optional[str] = None
    trials: int = Field(default=5, ge=1)

    @model_validator(mode="after")
    def _check_chain(self) -> EvalOutcome:
        if self.correct and not self.compiled:
            raise ValueError("a correct outcome must have compiled")
        if not self.correct and self.speedup != 0:
            raise ValueError("speedup must be 0 for an incorrect outcome")
        return self

    @staticmethod
    def failed(error_trace: str, trials: int = 5) -> EvalOutcome:
        return EvalOutcome(
            compiled=False, correct=False, error_trace=error_trace, trials=trials
        )


class SampleRecord(_Frozen):
    """One generated candidate and, once evaluated, its outcome.

    ``total_logprob`` is the sum of per-token log-probabilities in nats as
    reported by the policy backend. It is never length normalized here.
    """

    task_id: int
    seed: int
    sample_index: int = Field(ge=0)
    code: str
    token_count: int = Field(ge=1)
    total_logprob: float = Field(le=0)
    outcome: Optional[EvalOutcome] = None

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.task_id, self.seed, self.sample_index)

    @property
    def mean_token_logprob(self) -> float:
        return self.total_logprob / self.token_count

    @property
    def evaluated(self) -> bool:
        return self.outcome is not None

    @property
    def correct(self) -> bool:
        return self.outcome is not None and self.outcome.correct

    @property
    def speedup(self) -> float:
        return self.outcome.speedup if self.outcome is not None else 0.0

    def with_outcome(self, outcome: EvalOutcome) -> SampleRecord:
        return self.model_copy(update={"outcome": outcome})

    def dump(self) -> Dict[str, Any]:
        """Flatten into the run-record field layout."""
        if self.outcome is None:
            raise ValueError(f"sample {self.key} has not been evaluated")
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "sample_index": self.sample_index,
            "code": self.code,
            "token_count": self.token_count,
            "total_logprob": self.total_logprob,
            "compiled": self.outcome.compiled,
            "correct": self.outcome.correct,
            "speedup": self.outcome.speedup,
            "runtime": self.outcome.runtime,
            "error_trace": self.outcome.error_trace,
            "trials": self.outcome.trials,
        }

    @staticmethod
    def from_dump(data: Dict[str, Any]) -> SampleRecord:
        missing = [name for name in RECORD_FIELDS if name not in data]
        if missing:
            raise ValueError(f"run record is missing fields {missing}")
        outcome = EvalOutcome(
            compiled=data["compiled"],
            correct=data["correct"],
            speedup=data["speedup"],
            runtime=data["runtime"],
            error_trace=data["error_trace"],
            trials=data["trials"],
        )
        return SampleRecord(
            task_id=data["task_id"],
            seed=data["seed"],
            sample_index=data["sample_index"],
            code=data["code"],
            token_count=data["token_count"],
            total_logprob=data["total_logprob"],
            outcome=outcome,
        )

    def __repr__(self) -> str:
        return (
            f'<SampleRecord task_id="{self.task_id}" seed="{self.seed}" '
            f'sample_index="{self.sample_index}" token_count="{self.token_count}" '
            f'total_logprob="{self.total_logprob:.3f}" correct="{self.correct}" '
            f'speedup="{self.speedup:.3f}">'
        )


class CheckpointRef(_Frozen):
    """Opaque handle on a policy checkpoint.

    Attributes:
        id: Backend token identifying the checkpoint.
        lineage: ``(step, parent id)`` pairs from the root to the direct parent.
        backend_kind: Which backend owns the checkpoint.
        adapted_on: Task ids the checkpoint's ancestors were adapted on.
    """

    id: str
    lineage: Tuple[Tuple[int, str], ...] = ()
    backend_kind: BackendKind = BackendKind.SYNTHETIC
    adapted_on: Tuple[int, ...] = ()

    @model_validator(mode="after")
    def _check_lineage(self) -> CheckpointRef:
        steps = [step for step, _ in self.lineage]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lineage steps must be strictly increasing")
        ids = [parent for _, parent in self.lineage] + [self.id]
        if len(set(ids)) != len(ids):
            raise ValueError("lineage contains a cycle")
        return self

    @property
    def step(self) -> int:
        """Adaptation steps between the root and this checkpoint."""
        return self.lineage[-1][0] + 1 if self.lineage else 0

    @property
    def root(self) -> str:
        return self.lineage[0][1] if self.lineage else self.id

    def child(self, new_id: str, tasks: Tuple[int, ...] = ()) -> CheckpointRef:
        merged = tuple(sorted(set(self.adapted_on) | set(tasks)))
        return CheckpointRef(
            id=new_id,
            lineage=self.lineage + ((self.step, self.id),),
            backend_kind=self.backend_kind,
            adapted_on=merged,
        )
