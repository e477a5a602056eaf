from __future__ import annotations

import enum
import os
from pathlib import Path
from typing import List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ttcompute.core.objects import SelectionStrategy, TaskSpec
from ttcompute.evaluator.objects import EvaluatorProfile
from ttcompute.exceptions import ConfigError
from ttcompute.policy.objects import PolicyProfile

ENDPOINT_ENV = "TTCOMPUTE_BACKEND_URL"


class Mode(str, enum.Enum):
    BEST_OF_N = "best_of_n"
    BATCH_TTT = "batch_ttt"
    PER_TASK_TTT = "per_task_ttt"
    SDPO_FEEDBACK = "sdpo_feedback"
    SDPO_PROMPT_ONLY = "sdpo_prompt_only"
    PROBE = "probe"


ADAPTIVE_MODES = (
    Mode.BATCH_TTT,
    Mode.PER_TASK_TTT,
    Mode.SDPO_FEEDBACK,
    Mode.SDPO_PROMPT_ONLY,
    Mode.PROBE,
)


class CampaignConfig(BaseModel):
    """A fully seeded experiment plan.

    Field names match the campaign YAML documents one to one.
    ``rollout_budget`` counts rollouts per seed.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    tasks: List[TaskSpec]
    mode: Mode
    K: int = Field(ge=1)
    steps: int = Field(default=0, ge=0)
    temperature: float = 0.25
    max_tokens: int = 1024
    learning_rate: float = Field(default=1e-5, gt=0)
    patience: Optional[int] = None
    beta: float = 1.0
    seeds: List[int] = Field(default_factory=lambda: [42])
    strategy_list: List[SelectionStrategy] = Field(
        default_factory=lambda: list(SelectionStrategy)
    )
    rollout_budget: int

    name: str = "campaign"
    checkpoint: str = "base"
    scenario: str = "stock"
    evaluator: EvaluatorProfile = Field(default_factory=EvaluatorProfile)
    policy: PolicyProfile = Field(default_factory=PolicyProfile)
    workers: int = Field(default=4, ge=1)
    top3_retime: bool = False
    ci_method: str = "range"
    tail_fraction: float = Field(default=0.25, gt=0, le=1)
    adapt_tasks: List[int] = Field(default_factory=list)
    scaling_ks: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])

    @property
    def task_ids(self) -> Tuple[int, ...]:
        return tuple(task.task_id for task in self.tasks)

    def dump(self) -> dict:
        return self.model_dump(mode="json")


def planned_rollouts(config: CampaignConfig) -> int:
    """Rollouts one seed of ``config`` consumes.

    Adaptive modes draw one evaluation batch for step 0 and one batch per
    adaptation step. A transfer run adapts on ``adapt_tasks`` and then draws
    one batch on ``tasks`` from the selected checkpoint and one from the
    origin.
    """
    per_batch = len(config.tasks) * config.K
    if config.mode == Mode.BEST_OF_N:
        return per_batch
    if config.adapt_tasks:
        adapting = len(config.adapt_tasks) * config.K * (config.steps + 1)
        return adapting + 2 * per_batch
    return per_batch * (config.steps + 1)


def validate_config(config: CampaignConfig) -> List[str]:
    """Cross-field checks the model itself does not enforce.

    Returns:
        Violation descriptions; empty when the config is consistent.
    """
    violations = []

    if not config.tasks:
        violations.append("tasks must not be empty")
    ids = [task.task_id for task in config.tasks]
    if len(set(ids)) != len(ids):
        violations.append("task_id values must be unique within a campaign")

    if not config.seeds:
        violations.append("seeds must not be empty")
    elif len(set(config.seeds)) != len(config.seeds):
        violations.append("seeds must be unique")

    if config.temperature < 0:
        violations.append("temperature must be >= 0")
    if config.max_tokens < 1:
        violations.append("max_tokens must be >= 1")

    if config.mode in ADAPTIVE_MODES and config.steps < 1:
        violations.append(f"steps must be >= 1 for mode {config.mode.value}")
    if config.patience is not None and config.patience < 1:
        violations.append("patience must be >= 1")
    if config.ci_method not in ("range", "bootstrap"):
        violations.append(f"unknown ci_method {config.ci_method!r}")
    if config.adapt_tasks:
        if config.mode != Mode.BATCH_TTT:
            violations.append("adapt_tasks is only valid for mode batch_ttt")
        if set(config.adapt_tasks) & set(ids):
            violations.append("adapt_tasks overlap the evaluation tasks")

    planned = planned_rollouts(config)
    if config.rollout_budget != planned:
        violations.append(
            f"budget mismatch: rollout_budget {config.rollout_budget} "
            f"but the plan consumes {planned} rollouts per seed"
        )

    return violations


def load_config(path: Union[str, Path]) -> CampaignConfig:
    """Parse and validate a campaign YAML document.

    Raises:
        ConfigError: The document does not parse, does not fit the model, or
            fails :func:`validate_config`.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    if not isinstance(data, dict):
        raise ConfigError(f"config {path} is not a mapping")

    endpoint = os.environ.get(ENDPOINT_ENV)
    if endpoint:
        for section in ("evaluator", "policy"):
            data.setdefault(section, {})
            data[section]["endpoint"] = endpoint

    try:
        config = CampaignConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(
            [f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors()]
        ) from exc

    violations = validate_config(config)
    if violations:
        raise ConfigError(violations)
    return config
