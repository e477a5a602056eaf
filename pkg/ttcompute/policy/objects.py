from __future__ import annotations

import enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ttcompute.core.objects import CheckpointRef, SampleRecord


class PolicyKind(str, enum.Enum):
    SYNTHETIC = "synthetic"
    REMOTE = "remote"


class ArchetypeClass(str, enum.Enum):
    NAIVE_MODE = "naive_mode"
    EXPERT_TAIL = "expert_tail"
    BROKEN = "broken"


class PolicyProfile(BaseModel):
    """How to reach the sampling/training service.

    Attributes:
        kind: Synthetic (in process) or remote.
        endpoint: Base URL of the remote service.
        timeout: Seconds per request.
        max_in_flight: Concurrent sample/score requests allowed.
        poll_interval: Seconds between adapt job polls.
        poll_limit: Polls before an adapt job is declared lost.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: PolicyKind = PolicyKind.SYNTHETIC
    endpoint: Optional[str] = None
    timeout: float = Field(default=300.0, gt=0)
    max_in_flight: int = Field(default=8, ge=1)
    poll_interval: float = Field(default=5.0, ge=0)
    poll_limit: int = Field(default=720, ge=1)


class SampleBatchRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    checkpoint: CheckpointRef
    task_id: int
    K: int = Field(ge=1)
    temperature: float = Field(default=0.25, ge=0)
    max_tokens: int = Field(default=1024, ge=1)
    seed: int = 0
    step: int = 0


class SpeedupLaw(BaseModel):
    """Log-normal speedup of an archetype's correct completions.

    ``median`` is the median at the scenario's reference spread.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    median: float = Field(gt=0)
    dispersion: float = Field(default=0.0, ge=0)


class Archetype(BaseModel):
    """One solution strategy in a task's synthetic mixture.

    Completions sit at or below ``mean_logprob`` (the archetype's modal
    sequence logprob): a completion's excursion below the mode is
    ``logprob_spread * |z|``. ``tail_gain`` converts that excursion, measured
    against the excursion typical at ``reference_spread``, into a log-speedup
    bonus, so deeper excursions are faster kernels.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    archetype_class: ArchetypeClass
    weight: float = Field(ge=0, le=1)
    mean_logprob: float = Field(le=0)
    logprob_spread: float = Field(ge=0)
    correct_rate: float = Field(ge=0, le=1)
    compile_rate: float = Field(default=1.0, ge=0, le=1)
    speedup_law: SpeedupLaw = Field(default_factory=lambda: SpeedupLaw(median=1.0))
    tail_gain: float = Field(default=0.0, ge=0)
    reference_spread: Optional[float] = Field(default=None, ge=0)
    mean_tokens: int = Field(default=980, ge=1)


class SyntheticPolicyState(BaseModel):
    """Per-task archetype mixtures of one synthetic checkpoint.

    Attributes:
        tasks: Mixture per task id.
        reward_clip: Optional cap applied to rewards before they drive an
            update; rewards are used as given when unset.
        sharpening: Spread contraction per update at ``lr_reference``.
        lr_scale: Converts a learning rate into the exponential-weights step.
        lr_reference: Learning rate at which one update contracts by
            ``sharpening`` exactly.
        logprob_sensitivity: Nats the modal logprob moves per unit change of
            log weight.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    tasks: Dict[int, Tuple[Archetype, ...]]
    reward_clip: Optional[float] = Field(default=None, gt=0)
    sharpening: float = Field(default=0.9, gt=0, le=1)
    lr_scale: float = Field(default=5e4, ge=0)
    lr_reference: float = Field(default=1e-5, gt=0)
    logprob_sensitivity: float = Field(default=10.0, ge=0)

    @model_validator(mode="after")
    def _check_mixtures(self) -> SyntheticPolicyState:
        for task_id, archetypes in self.tasks.items():
            if not archetypes:
                raise ValueError(f"task {task_id} has no archetypes")
            total = sum(a.weight for a in archetypes)
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"task {task_id} weights sum to {total}, not 1")
            naive = [
                a.mean_logprob
                for a in archetypes
                if a.archetype_class == ArchetypeClass.NAIVE_MODE
            ]
            tail = [
                a.mean_logprob
                for a in archetypes
                if a.archetype_class == ArchetypeClass.EXPERT_TAIL
            ]
            if naive and tail and max(tail) >= min(naive):
                raise ValueError(
                    f"task {task_id}: expert_tail archetypes must be less "
                    f"probable than naive_mode archetypes"
                )
        return self

    def archetypes(self, task_id: int) -> Tuple[Archetype, ...]:
        return self.tasks[task_id]

    def archetype(self, task_id: int, name: str) -> Archetype:
        for archetype in self.tasks[task_id]:
            if archetype.name == name:
                return archetype
        raise KeyError(f"task {task_id} has no archetype {name!r}")

    def class_mass(self, archetype_class: ArchetypeClass) -> float:
        """Mean over tasks of the weight held by ``archetype_class``."""
        masses = [
            sum(a.weight for a in archetypes if a.archetype_class == archetype_class)
            for archetypes in self.tasks.values()
        ]
        return sum(masses) / len(masses)


class AdaptOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    new_checkpoint: CheckpointRef
    rollouts_consumed: int = Field(ge=1)
    student_tokens: int = Field(ge=0)


class ScoredRollout(BaseModel):
    """A rollout handed to ``adapt``: the sample and the reward it earned."""

    model_config = ConfigDict(frozen=True)

    sample: SampleRecord
    reward: float


class TokenScores(BaseModel):
    """Per-token log-probabilities of a fixed completion.

    ``context_tokens`` counts the tokens of the conditioning context as the
    backend tokenized it.
    """

    model_config = ConfigDict(frozen=True)

    logprobs: List[float]
    context_tokens: int = Field(default=0, ge=0)

