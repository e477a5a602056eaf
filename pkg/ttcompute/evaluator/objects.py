from __future__ import annotations

import enum
from typing import Dict, Optional

from pydantic import BaseModel, ConfigDict, Field

FAST_PROXY_TRIALS = 5
FULL_PROTOCOL_TRIALS = 50


class EvaluatorKind(str, enum.Enum):
    SYNTHETIC = "synthetic"
    REMOTE = "remote"


class EvalRequest(BaseModel):
    """One candidate to compile, check and time.

    ``trials`` is 5 for the fast-proxy protocol and 50 for the full one.
    """

    model_config = ConfigDict(frozen=True)

    task_id: int
    code: str
    trials: int = Field(default=FAST_PROXY_TRIALS, ge=1)


class EvaluatorProfile(BaseModel):
    """How to reach an evaluator and how it times candidates.

    Attributes:
        kind: Synthetic (in process) or remote (HTTP service).
        trials_default: Trials used when a request does not override them.
        timeout: Seconds before a remote evaluation counts as a compile failure.
        jitter: Multiplicative per-trial timing noise amplitude (synthetic).
        runtime_floor: Smallest runtime in milliseconds the evaluator reports.
        endpoint: Base URL of the remote service.
        max_in_flight: Concurrent requests the remote adapter allows.
        baseline_times: Per-task reference runtimes in milliseconds.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: EvaluatorKind = EvaluatorKind.SYNTHETIC
    trials_default: int = Field(default=FAST_PROXY_TRIALS, ge=1)
    timeout: float = Field(default=120.0, gt=0)
    jitter: float = Field(default=0.05, ge=0, lt=1)
    runtime_floor: float = Field(default=1e-6, gt=0)
    endpoint: Optional[str] = None
    max_in_flight: int = Field(default=8, ge=1)
    baseline_times: Dict[int, float] = Field(default_factory=dict)
