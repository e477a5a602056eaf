from __future__ import annotations

import statistics
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence

import httpx

from ttcompute import logger
from ttcompute.core.objects import EvalOutcome, SampleRecord
from ttcompute.evaluator.objects import EvalRequest, EvaluatorKind, EvaluatorProfile
from ttcompute.evaluator.utils import parse_tag, unit_interval
from ttcompute.exceptions import (
    BackendError,
    BackendUnreachableError,
    ConfigError,
    MALFORMED_BODY,
    UnknownTaskError,
)

backend_log = logger.Backend.logger("evaluator")


def compute_reward(outcome: EvalOutcome) -> float:
    """Continuous reward: the speedup of a correct candidate, otherwise 0."""
    return outcome.speedup if outcome.correct else 0.0


def is_fast1(outcome: EvalOutcome) -> bool:
    """Correct and strictly faster than the reference."""
    return outcome.correct and outcome.speedup > 1.0


class Evaluator:
    """Execution-grounded evaluation contract."""

    profile: EvaluatorProfile

    def evaluate(self, request: EvalRequest) -> EvalOutcome:
        raise NotImplementedError

    def evaluate_sample(
        self, sample: SampleRecord, trials: Optional[int] = None
    ) -> SampleRecord:
        request = EvalRequest(
            task_id=sample.task_id,
            code=sample.code,
            trials=trials or self.profile.trials_default,
        )
        return sample.with_outcome(self.evaluate(request))

    def evaluate_samples(
        self,
        samples: Sequence[SampleRecord],
        workers: int = 1,
        trials: Optional[int] = None,
    ) -> List[SampleRecord]:
        """Evaluate many samples; the result keeps the input order."""
        if workers <= 1 or len(samples) <= 1:
            return [self.evaluate_sample(sample, trials) for sample in samples]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: self.evaluate_sample(s, trials), samples))

    def close(self) -> None:
        pass


class SyntheticEvaluator(Evaluator):
    """Deterministic stand-in for a compile-and-time service.

    Candidates carry a behaviour tag written by the synthetic policy. Each of
    the ``trials`` timings is the tagged kernel time perturbed by a hashed
    multiplicative jitter; the reported runtime is their median. The outcome
    depends on ``(task_id, code, trials)`` only.
    """

    def __init__(
        self,
        baseline_times: Mapping[int, float],
        profile: Optional[EvaluatorProfile] = None,
    ):
        self.profile = profile or EvaluatorProfile()
        self.baseline_times: Dict[int, float] = {
            **dict(baseline_times),
            **self.profile.baseline_times,
        }

    def evaluate(self, request: EvalRequest) -> EvalOutcome:
        baseline = self.baseline_times.get(request.task_id)
        if baseline is None:
            raise UnknownTaskError(request.task_id)

        tag = parse_tag(request.code)
        if tag is None:
            return EvalOutcome.failed(
                "error: missing kernel entry point (no behaviour header)",
                trials=request.trials,
            )
        if not tag.compiled:
            return EvalOutcome.failed(
                f"error: compilation failed in kernel {tag.key:016x} "
                f"(nvcc exit status 1)",
                trials=request.trials,
            )
        if not tag.correct or tag.speedup <= 0:
            return EvalOutcome(
                compiled=True,
                correct=False,
                error_trace=(
                    f"output mismatch against reference (kernel {tag.key:016x})"
                ),
                trials=request.trials,
            )

        kernel_time = baseline / tag.speedup
        jitter = self.profile.jitter
        timings = []
        for trial in range(request.trials):
            u = unit_interval(request.task_id, tag.key, trial)
            timings.append(kernel_time * (1.0 + jitter * (2.0 * u - 1.0)))
        runtime = max(statistics.median(timings), self.profile.runtime_floor)
        return EvalOutcome(
            compiled=True,
            correct=True,
            speedup=baseline / runtime,
            runtime=runtime,
            trials=request.trials,
        )


class RemoteEvaluator(Evaluator):
    """Adapter for a remote compile-and-time service.

    Wire contract: ``POST {endpoint}/evaluate`` with ``{task_id, code, trials}``
    answered by ``{compiled, correct, speedup, runtime, error_trace}``.
    A timeout is reported as a compile failure so the rollout still counts.
    """

    def __init__(
        self,
        profile: EvaluatorProfile,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        if not profile.endpoint:
            raise ConfigError("remote evaluator needs an endpoint")
        self.profile = profile
        self._slots = threading.BoundedSemaphore(profile.max_in_flight)
        self._client = httpx.Client(
            base_url=profile.endpoint,
            timeout=httpx.Timeout(profile.timeout, connect=30.0),
            transport=transport,
        )

    def evaluate(self, request: EvalRequest) -> EvalOutcome:
        body = {
            "task_id": request.task_id,
            "code": request.code,
            "trials": request.trials,
        }
        with self._slots:
            try:
                response = self._client.post("/evaluate", json=body)
            except httpx.TimeoutException:
                backend_log.warning(
                    "Evaluation of task %d timed out after %.0fs; counted as compile "
                    "failure.",
                    request.task_id,
                    self.profile.timeout,
                )
                return EvalOutcome.failed(
                    f"timeout: evaluation exceeded {self.profile.timeout:.0f}s",
                    trials=request.trials,
                )
            except httpx.TransportError as exc:
                raise BackendUnreachableError(
                    f"evaluator at {self.profile.endpoint} unreachable: {exc}"
                ) from exc

        if response.status_code == 404:
            raise UnknownTaskError(request.task_id)
        if response.status_code >= 400:
            raise BackendError(
                f"evaluator answered {response.status_code}: {response.text[:200]}"
            )

        try:
            data = response.json()
            compiled = bool(data["compiled"])
            correct = compiled and bool(data["correct"])
            return EvalOutcome(
                compiled=compiled,
                correct=correct,
                speedup=float(data["speedup"]) if correct else 0.0,
                runtime=float(data.get("runtime") or 0.0),
                error_trace=data.get("error_trace"),
                trials=request.trials,
            )
        except MALFORMED_BODY as exc:
            raise BackendError(
                f"evaluator sent a malformed body for task {request.task_id}: "
                f"{exc!r}"
            ) from exc

    def close(self) -> None:
        self._client.close()


def create_evaluator(
    profile: EvaluatorProfile, baseline_times: Mapping[int, float]
) -> Evaluator:
    if profile.kind == EvaluatorKind.REMOTE:
        return RemoteEvaluator(profile)
    return SyntheticEvaluator(baseline_times, profile)
