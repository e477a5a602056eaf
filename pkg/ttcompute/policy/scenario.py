"""Synthetic scenarios: archetype mixtures, baseline times and task prompts.

A scenario YAML names a default mixture applied to every task plus optional
per-task overrides::

    name: stock
    default_baseline_time: 1.0
    archetypes:
      - name: naive_mode
        archetype_class: naive_mode
        weight: 0.80
        ...
    tasks:
      4: {baseline_time: 2.1}

Tasks a campaign asks for but the scenario does not list get the defaults.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ttcompute.exceptions import ConfigError
from ttcompute.policy.objects import Archetype, SyntheticPolicyState

SCENARIO_DIR = Path(__file__).parent / "scenarios"

DEFAULT_PROMPT = (
    "Task {task_id}: write a CUDA kernel that computes the same output as the "
    "PyTorch reference and runs faster."
)


class TaskOverride(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    baseline_time: Optional[float] = Field(default=None, gt=0)
    prompt: Optional[str] = None
    archetypes: Optional[List[Archetype]] = None


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    default_baseline_time: float = Field(default=1.0, gt=0)
    archetypes: List[Archetype]
    tasks: Dict[int, TaskOverride] = Field(default_factory=dict)
    reward_clip: Optional[float] = Field(default=None, gt=0)
    sharpening: float = Field(default=0.9, gt=0, le=1)
    lr_scale: float = Field(default=5e4, ge=0)
    lr_reference: float = Field(default=1e-5, gt=0)
    logprob_sensitivity: float = Field(default=10.0, ge=0)
    feedback_gain: float = Field(default=2.0, ge=0)

    def _mixture(self, task_id: int) -> Tuple[Archetype, ...]:
        override = self.tasks.get(task_id)
        archetypes = (
            override.archetypes if override and override.archetypes else None
        ) or self.archetypes
        # Speedup excursions are measured against the root spread.
        return tuple(
            a
            if a.reference_spread is not None
            else a.model_copy(update={"reference_spread": a.logprob_spread})
            for a in archetypes
        )

    def baseline_time(self, task_id: int) -> float:
        override = self.tasks.get(task_id)
        if override and override.baseline_time is not None:
            return override.baseline_time
        return self.default_baseline_time

    def prompt(self, task_id: int) -> str:
        override = self.tasks.get(task_id)
        if override and override.prompt:
            return override.prompt
        return DEFAULT_PROMPT.format(task_id=task_id)

    def state(self, task_ids: Iterable[int]) -> SyntheticPolicyState:
        """Root checkpoint state covering ``task_ids``."""
        return SyntheticPolicyState(
            tasks={task_id: self._mixture(task_id) for task_id in task_ids},
            reward_clip=self.reward_clip,
            sharpening=self.sharpening,
            lr_scale=self.lr_scale,
            lr_reference=self.lr_reference,
            logprob_sensitivity=self.logprob_sensitivity,
        )

    def baseline_times(self, task_ids: Iterable[int]) -> Dict[int, float]:
        return {task_id: self.baseline_time(task_id) for task_id in task_ids}


def load_scenario(name: Union[str, Path]) -> Scenario:
    """Load a shipped scenario by name, or any scenario YAML by path.

    Raises:
        ConfigError: The scenario cannot be found or does not validate.
    """
    path = Path(name)
    if not path.suffix:
        path = SCENARIO_DIR / f"{name}.yaml"
    try:
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scenario {name}: {exc}") from exc
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(
            [f"scenario {e['loc']}: {e['msg']}" for e in exc.errors()]
        ) from exc
