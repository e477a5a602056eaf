from __future__ import annotations

import hashlib
import math
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import httpx
import numpy as np

from ttcompute import logger
from ttcompute.core.objects import BackendKind, CheckpointRef, SampleRecord
from ttcompute.evaluator.utils import (
    BehaviorTag,
    hash_text,
    mix64,
    parse_tag,
    unit_interval,
)
from ttcompute.exceptions import (
    BackendError,
    BackendUnreachableError,
    ConfigError,
    EmptyRolloutsError,
    InputError,
    MALFORMED_BODY,
    UnknownCheckpointError,
    UnknownTaskError,
)
from ttcompute.policy.objects import (
    AdaptOutcome,
    Archetype,
    PolicyKind,
    PolicyProfile,
    SampleBatchRequest,
    ScoredRollout,
    SyntheticPolicyState,
    TokenScores,
)
from ttcompute.policy.scenario import DEFAULT_PROMPT, Scenario

backend_log = logger.Backend.logger("policy")

# Excursions are expressed in spread units at this temperature.
TEMPERATURE_REFERENCE = 0.25
# Median of |z| for a standard normal z.
HALF_NORMAL_MEDIAN = 0.6745

KERNEL_BODY = """\
// task {task_id}, {arch} candidate {key:016x}
#include <torch/extension.h>

__global__ void kernel_{key:016x}(const float* x, float* y, int n) {{
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n) {{
        y[i] = x[i];
    }}
}}
"""


def sequence_logprob(archetype: Archetype, z: float) -> float:
    """Sequence logprob of a completion ``|z|`` spreads below the mode."""
    return min(0.0, archetype.mean_logprob - archetype.logprob_spread * abs(z))


class Policy:
    """Sampling, scoring and adaptation over checkpoints.

    ``adapt`` calls that share a lineage root are serialized.
    """

    profile: PolicyProfile

    def __init__(self):
        self._locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lineage_lock(self, checkpoint: CheckpointRef) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(checkpoint.root, threading.Lock())

    def root(self, checkpoint_id: str) -> CheckpointRef:
        raise NotImplementedError

    def task_prompt(self, task_id: int) -> str:
        return DEFAULT_PROMPT.format(task_id=task_id)

    def draw_samples(self, request: SampleBatchRequest) -> List[SampleRecord]:
        raise NotImplementedError

    def draw_samples_many(
        self, requests: Sequence[SampleBatchRequest], workers: int = 1
    ) -> List[List[SampleRecord]]:
        """Serve several requests; results keep the request order."""
        if workers <= 1 or len(requests) <= 1:
            return [self.draw_samples(request) for request in requests]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.draw_samples, requests))

    def score_nll(self, checkpoint: CheckpointRef, sample: SampleRecord) -> float:
        raise NotImplementedError

    def token_logprobs(
        self, checkpoint: CheckpointRef, sample: SampleRecord
    ) -> TokenScores:
        """Per-token logprobs of ``sample`` under the student context."""
        raise NotImplementedError

    def teacher_logprobs(
        self, checkpoint: CheckpointRef, sample: SampleRecord, context: str
    ) -> TokenScores:
        """Per-token logprobs of ``sample``'s tokens conditioned on ``context``."""
        raise NotImplementedError

    def adapt(
        self,
        checkpoint: CheckpointRef,
        rollouts: Sequence[ScoredRollout],
        learning_rate: float,
    ) -> AdaptOutcome:
        """Apply one update on ``rollouts`` and return the child checkpoint.

        Raises:
            EmptyRolloutsError: ``rollouts`` is empty.
            InputError: A rollout has not been evaluated.
            UnknownCheckpointError: The backend does not know ``checkpoint``.
        """
        if not rollouts:
            raise EmptyRolloutsError(f"adapt on {checkpoint.id} got no rollouts")
        pending = [r.sample.key for r in rollouts if not r.sample.evaluated]
        if pending:
            raise InputError(f"rollouts {pending[:3]} have not been evaluated")
        if learning_rate < 0:
            raise InputError(f"learning rate {learning_rate} is negative")
        with self._lineage_lock(checkpoint):
            return self._adapt(checkpoint, rollouts, learning_rate)

    def _adapt(
        self,
        checkpoint: CheckpointRef,
        rollouts: Sequence[ScoredRollout],
        learning_rate: float,
    ) -> AdaptOutcome:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SyntheticPolicy(Policy):
    """In-process sharpening policy.

    Each checkpoint holds a :class:`SyntheticPolicyState`. Sampling is keyed
    by ``(checkpoint, task, seed, step)`` through a Philox generator, so
    identical requests produce identical records. Every emitted completion
    carries a behaviour tag for the synthetic evaluator.
    """

    def __init__(
        self,
        state: SyntheticPolicyState,
        root_id: str = "base",
        prompts: Optional[Mapping[int, str]] = None,
        feedback_gain: float = 2.0,
    ):
        super().__init__()
        self.profile = PolicyProfile(kind=PolicyKind.SYNTHETIC)
        self.prompts = dict(prompts or {})
        self.feedback_gain = feedback_gain
        self._registry: Dict[str, Tuple[CheckpointRef, SyntheticPolicyState]] = {}
        self._registry_guard = threading.Lock()
        self._register(CheckpointRef(id=root_id), state)

    @staticmethod
    def from_scenario(
        scenario: Scenario, task_ids: Sequence[int], root_id: str = "base"
    ) -> SyntheticPolicy:
        return SyntheticPolicy(
            scenario.state(task_ids),
            root_id=root_id,
            prompts={task_id: scenario.prompt(task_id) for task_id in task_ids},
            feedback_gain=scenario.feedback_gain,
        )

    def _register(self, checkpoint: CheckpointRef, state: SyntheticPolicyState):
        with self._registry_guard:
            self._registry.setdefault(checkpoint.id, (checkpoint, state))

    def root(self, checkpoint_id: str = "base") -> CheckpointRef:
        return self.checkpoint(checkpoint_id)

    def checkpoint(self, checkpoint_id: str) -> CheckpointRef:
        try:
            return self._registry[checkpoint_id][0]
        except KeyError:
            raise UnknownCheckpointError(checkpoint_id) from None

    def state(self, checkpoint: CheckpointRef) -> SyntheticPolicyState:
        try:
            return self._registry[checkpoint.id][1]
        except KeyError:
            raise UnknownCheckpointError(checkpoint.id) from None

    def task_prompt(self, task_id: int) -> str:
        return self.prompts.get(task_id) or super().task_prompt(task_id)

    def _mixture(
        self, checkpoint: CheckpointRef, task_id: int
    ) -> Tuple[Archetype, ...]:
        tasks = self.state(checkpoint).tasks
        if task_id not in tasks:
            raise UnknownTaskError(task_id)
        return tasks[task_id]

    def draw_samples(self, request: SampleBatchRequest) -> List[SampleRecord]:
        mixture = self._mixture(request.checkpoint, request.task_id)
        weights = np.array([a.weight for a in mixture], dtype=float)
        weights = weights / weights.sum()
        stream = mix64(
            hash_text(request.checkpoint.id),
            request.task_id,
            request.seed,
            request.step,
        )
        rng = np.random.Generator(np.random.Philox(key=stream))
        scale = math.sqrt(request.temperature / TEMPERATURE_REFERENCE)

        records = []
        for index in range(request.K):
            archetype = mixture[int(rng.choice(len(mixture), p=weights))]
            z = float(f"{rng.standard_normal() * scale:.9f}")
            xi = rng.standard_normal()
            compiled = rng.random() < archetype.compile_rate
            correct = compiled and rng.random() < archetype.correct_rate
            length = archetype.mean_tokens * math.exp(0.1 * rng.standard_normal())

            speedup = 0.0
            if correct:
                reference = archetype.reference_spread
                if reference is None:
                    reference = archetype.logprob_spread
                law = archetype.speedup_law
                excursion = archetype.logprob_spread * abs(z)
                speedup = law.median * math.exp(
                    law.dispersion * xi
                    + archetype.tail_gain
                    * (excursion - reference * HALF_NORMAL_MEDIAN)
                )

            tag = BehaviorTag(
                arch=archetype.name,
                compiled=compiled,
                correct=correct,
                speedup=speedup,
                key=mix64(stream, index),
                z=z,
            )
            body = KERNEL_BODY.format(
                task_id=request.task_id, arch=archetype.name, key=tag.key
            )
            records.append(
                SampleRecord(
                    task_id=request.task_id,
                    seed=request.seed,
                    sample_index=index,
                    code=f"{tag.render()}\n{body}",
                    token_count=max(1, min(request.max_tokens, round(length))),
                    total_logprob=sequence_logprob(archetype, z),
                )
            )

        backend_log.debug(
            "Drew %d samples for task %d from %s (seed %d, step %d).",
            request.K,
            request.task_id,
            request.checkpoint.id,
            request.seed,
            request.step,
        )
        return records

    def score_nll(self, checkpoint: CheckpointRef, sample: SampleRecord) -> float:
        """NLL of the fixed sample text under ``checkpoint``.

        Samples without a behaviour tag, or whose archetype the checkpoint
        does not know, keep the logprob they were emitted with.
        """
        mixture = self._mixture(checkpoint, sample.task_id)
        tag = parse_tag(sample.code)
        if tag is None:
            return -sample.total_logprob
        for archetype in mixture:
            if archetype.name == tag.arch:
                return -sequence_logprob(archetype, tag.z)
        return -sample.total_logprob

    def _spread_tokens(self, sample: SampleRecord, total: float) -> List[float]:
        """Split ``total`` over the sample's tokens with fixed hashed weights."""
        key = hash_text(sample.code)
        shares = np.array(
            [0.5 + unit_interval(key, t) for t in range(sample.token_count)]
        )
        return list(total * shares / shares.sum())

    def token_logprobs(
        self, checkpoint: CheckpointRef, sample: SampleRecord
    ) -> TokenScores:
        total = -self.score_nll(checkpoint, sample)
        prompt = self.task_prompt(sample.task_id)
        return TokenScores(
            logprobs=self._spread_tokens(sample, total),
            context_tokens=len(prompt.split()),
        )

    def teacher_logprobs(
        self, checkpoint: CheckpointRef, sample: SampleRecord, context: str
    ) -> TokenScores:
        """Teacher scores for ``sample``'s tokens given ``context``.

        A context equal to the student prompt gives the student's own scores.
        A richer context shifts the sequence logprob by ``feedback_gain``
        towards fast correct completions and away from failing ones.
        """
        total = -self.score_nll(checkpoint, sample)
        if context != self.task_prompt(sample.task_id):
            tag = parse_tag(sample.code)
            if tag is not None and tag.correct:
                signal = 1.0 if tag.speedup > 1.0 else 0.0
            else:
                signal = -1.0
            total = min(0.0, total + self.feedback_gain * signal)
        return TokenScores(
            logprobs=self._spread_tokens(sample, total),
            context_tokens=len(context.split()),
        )

    def _adapt(
        self,
        checkpoint: CheckpointRef,
        rollouts: Sequence[ScoredRollout],
        learning_rate: float,
    ) -> AdaptOutcome:
        state = self.state(checkpoint)
        by_task: Dict[int, List[ScoredRollout]] = defaultdict(list)
        for rollout in rollouts:
            by_task[rollout.sample.task_id].append(rollout)

        if learning_rate == 0:
            new_state = state
        else:
            new_state = self._updated(state, by_task, learning_rate)

        digest = hashlib.blake2b(digest_size=6)
        digest.update(f"{checkpoint.id}|{learning_rate!r}".encode("utf-8"))
        for rollout in rollouts:
            entry = f"|{hash_text(rollout.sample.code)}:{rollout.reward!r}"
            digest.update(entry.encode("utf-8"))
        child = checkpoint.child(
            f"syn-{digest.hexdigest()}", tasks=tuple(sorted(by_task))
        )
        self._register(child, new_state)

        backend_log.info(
            "Adapted %s -> %s on %d rollouts (lr %g).",
            checkpoint.id,
            child.id,
            len(rollouts),
            learning_rate,
        )
        return AdaptOutcome(
            new_checkpoint=child,
            rollouts_consumed=len(rollouts),
            student_tokens=sum(r.sample.token_count for r in rollouts),
        )

    @staticmethod
    def _updated(
        state: SyntheticPolicyState,
        by_task: Mapping[int, Sequence[ScoredRollout]],
        learning_rate: float,
    ) -> SyntheticPolicyState:
        """Exponential-weights update plus spread contraction.

        Each archetype's weight is multiplied by ``exp(eta * advantage)``, the
        advantage being its mean reward in the task's batch minus the batch
        mean. An archetype with no rollout in the batch earned nothing, so its
        mean reward is 0.
        """
        eta = learning_rate * state.lr_scale
        contraction = state.sharpening ** (learning_rate / state.lr_reference)

        tasks = {}
        for task_id, mixture in state.tasks.items():
            weights = np.array([a.weight for a in mixture], dtype=float)
            batch = by_task.get(task_id, ())
            if batch:
                rewards = np.array([r.reward for r in batch], dtype=float)
                if state.reward_clip is not None:
                    rewards = np.minimum(rewards, state.reward_clip)
                tags = [parse_tag(r.sample.code) for r in batch]
                names = [tag.arch if tag else None for tag in tags]
                means = np.zeros(len(mixture))
                for i, archetype in enumerate(mixture):
                    mask = np.array([name == archetype.name for name in names])
                    if mask.any():
                        means[i] = rewards[mask].mean()
                advantage = means - rewards.mean()
                # Shifting by the max keeps the exponent finite; it cancels below.
                new_weights = weights * np.exp(eta * (advantage - advantage.max()))
                new_weights = new_weights / new_weights.sum()
            else:
                new_weights = weights

            updated = []
            for archetype, old, new in zip(mixture, weights, new_weights):
                shift = 0.0
                if old > 0 and new > 0:
                    shift = state.logprob_sensitivity * math.log(new / old)
                updated.append(
                    archetype.model_copy(
                        update={
                            "weight": float(new),
                            "logprob_spread": archetype.logprob_spread * contraction,
                            "mean_logprob": min(0.0, archetype.mean_logprob + shift),
                        }
                    )
                )
            tasks[task_id] = tuple(updated)
        return state.model_copy(update={"tasks": tasks})


class RemotePolicy(Policy):
    """Adapter for a remote sampling/training service.

    Endpoints: ``POST /sample``, ``POST /score``, ``POST /token_logprobs``,
    ``POST /teacher_logprobs``, ``POST /adapt`` and ``GET /adapt/{job_id}``.
    See ``docs/wire-protocol.md`` for the bodies.
    """

    def __init__(
        self,
        profile: PolicyProfile,
        transport: Optional[httpx.BaseTransport] = None,
        prompts: Optional[Mapping[int, str]] = None,
    ):
        super().__init__()
        if not profile.endpoint:
            raise ConfigError("remote policy needs an endpoint")
        self.profile = profile
        self.prompts = dict(prompts or {})
        self._slots = threading.BoundedSemaphore(profile.max_in_flight)
        self._client = httpx.Client(
            base_url=profile.endpoint,
            timeout=httpx.Timeout(profile.timeout, connect=30.0),
            transport=transport,
        )

    def root(self, checkpoint_id: str) -> CheckpointRef:
        return CheckpointRef(id=checkpoint_id, backend_kind=BackendKind.REMOTE)

    def task_prompt(self, task_id: int) -> str:
        return self.prompts.get(task_id) or super().task_prompt(task_id)

    def _call(
        self,
        method: str,
        path: str,
        checkpoint_id: str,
        body: Optional[dict] = None,
        task_id: Optional[int] = None,
    ) -> dict:
        with self._slots:
            try:
                response = self._client.request(method, path, json=body)
            except httpx.TransportError as exc:
                raise BackendUnreachableError(
                    f"policy service at {self.profile.endpoint} unreachable: {exc}"
                ) from exc
        if response.status_code == 404:
            try:
                detail = response.json().get("error")
            except (ValueError, AttributeError):
                detail = None
            if detail == "unknown_task" and task_id is not None:
                raise UnknownTaskError(task_id)
            raise UnknownCheckpointError(checkpoint_id)
        if response.status_code >= 400:
            raise BackendError(
                f"policy service answered {response.status_code} on {path}: "
                f"{response.text[:200]}"
            )
        try:
            data = response.json()
        except ValueError as exc:
            raise BackendError(f"policy service sent invalid JSON on {path}") from exc
        if not isinstance(data, dict):
            raise BackendError(f"policy service sent a non-object body on {path}")
        return data

    def _malformed(self, path: str, exc: Exception) -> BackendError:
        return BackendError(f"policy service sent a malformed body on {path}: {exc!r}")

    def draw_samples(self, request: SampleBatchRequest) -> List[SampleRecord]:
        data = self._call(
            "POST",
            "/sample",
            request.checkpoint.id,
            {
                "checkpoint_id": request.checkpoint.id,
                "prompt_id": request.task_id,
                "K": request.K,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
                "seed": request.seed,
            },
            task_id=request.task_id,
        )
        try:
            records = [
                SampleRecord(
                    task_id=request.task_id,
                    seed=request.seed,
                    sample_index=index,
                    code=item["code"],
                    token_count=int(item["token_count"]),
                    total_logprob=min(0.0, float(item["total_logprob"])),
                )
                for index, item in enumerate(data["samples"])
            ]
        except MALFORMED_BODY as exc:
            raise self._malformed("/sample", exc) from exc
        if len(records) != request.K:
            raise BackendError(
                f"asked for {request.K} samples of task {request.task_id}, "
                f"got {len(records)}"
            )
        return records

    def score_nll(self, checkpoint: CheckpointRef, sample: SampleRecord) -> float:
        data = self._call(
            "POST",
            "/score",
            checkpoint.id,
            {"checkpoint_id": checkpoint.id, "code": sample.code},
        )
        try:
            return max(0.0, float(data["nll"]))
        except MALFORMED_BODY as exc:
            raise self._malformed("/score", exc) from exc

    def token_logprobs(
        self, checkpoint: CheckpointRef, sample: SampleRecord
    ) -> TokenScores:
        data = self._call(
            "POST",
            "/token_logprobs",
            checkpoint.id,
            {
                "checkpoint_id": checkpoint.id,
                "prompt_id": sample.task_id,
                "code": sample.code,
            },
            task_id=sample.task_id,
        )
        try:
            return TokenScores.model_validate(data)
        except MALFORMED_BODY as exc:
            raise self._malformed("/token_logprobs", exc) from exc

    def teacher_logprobs(
        self, checkpoint: CheckpointRef, sample: SampleRecord, context: str
    ) -> TokenScores:
        data = self._call(
            "POST",
            "/teacher_logprobs",
            checkpoint.id,
            {"checkpoint_id": checkpoint.id, "context": context, "code": sample.code},
        )
        try:
            return TokenScores.model_validate(data)
        except MALFORMED_BODY as exc:
            raise self._malformed("/teacher_logprobs", exc) from exc

    def _adapt(
        self,
        checkpoint: CheckpointRef,
        rollouts: Sequence[ScoredRollout],
        learning_rate: float,
    ) -> AdaptOutcome:
        job = self._call(
            "POST",
            "/adapt",
            checkpoint.id,
            {
                "checkpoint_id": checkpoint.id,
                "rollouts": [
                    {"code": r.sample.code, "reward": r.reward} for r in rollouts
                ],
                "learning_rate": learning_rate,
            },
        )
        try:
            job_id = str(job["job_id"])
        except MALFORMED_BODY as exc:
            raise self._malformed("/adapt", exc) from exc
        backend_log.info("Adapt job %s started on %s.", job_id, checkpoint.id)

        for _ in range(self.profile.poll_limit):
            status = self._call("GET", f"/adapt/{job_id}", checkpoint.id)
            if status.get("error"):
                raise BackendError(f"adapt job {job_id} failed: {status['error']}")
            new_id = status.get("new_checkpoint_id")
            if new_id:
                child = checkpoint.child(
                    new_id,
                    tasks=tuple(sorted({r.sample.task_id for r in rollouts})),
                )
                return AdaptOutcome(
                    new_checkpoint=child,
                    rollouts_consumed=len(rollouts),
                    student_tokens=sum(r.sample.token_count for r in rollouts),
                )
            time.sleep(self.profile.poll_interval)

        raise BackendError(
            f"adapt job {job_id} did not finish after {self.profile.poll_limit} polls"
        )

    def close(self) -> None:
        self._client.close()


def create_policy(
    profile: PolicyProfile,
    scenario: Scenario,
    task_ids: Sequence[int],
    root_id: str = "base",
) -> Policy:
    if profile.kind == PolicyKind.REMOTE:
        return RemotePolicy(
            profile,
            prompts={task_id: scenario.prompt(task_id) for task_id in task_ids},
        )
    return SyntheticPolicy.from_scenario(scenario, task_ids, root_id=root_id)
