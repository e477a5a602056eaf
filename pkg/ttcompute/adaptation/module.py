from __future__ import annotations

import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from ttcompute import logger
from ttcompute.adaptation.objects import (
    BoaResult,
    BudgetCheck,
    BudgetLedger,
    CoverageBand,
    DeficitReport,
    TaskDeficit,
    TrajectoryStep,
    TransferReport,
)
from ttcompute.core.config import CampaignConfig
from ttcompute.core.objects import CheckpointRef, EvalOutcome, SampleRecord
from ttcompute.evaluator.module import Evaluator, compute_reward
from ttcompute.exceptions import (
    BackendError,
    EmptyInputError,
    OverlapDetectedError,
    ParameterOutOfRangeError,
    UnknownCheckpointError,
    UnknownTaskError,
)
from ttcompute.policy.module import Policy
from ttcompute.policy.objects import SampleBatchRequest, ScoredRollout
from ttcompute.scaling.module import fast1_rate, per_task_fast1

campaign_log = logger.Campaign.logger("adaptation")

BACKEND_FAILURE = "backend error"
# Base fast_1 rate above which a task counts as covered by Best-of-N.
COVERAGE_THRESHOLD = 0.3

# Maps a step's evaluated batch to per-rollout rewards plus teacher tokens.
RewardFn = Callable[
    [CheckpointRef, Sequence[SampleRecord]], Tuple[List[float], int]
]
# Receives each step's batch, in step order, for persistence.
StepSink = Callable[[int, CheckpointRef, Sequence[SampleRecord]], None]


def speedup_rewards(
    checkpoint: CheckpointRef, batch: Sequence[SampleRecord]
) -> Tuple[List[float], int]:
    """Continuous speedup reward; no teacher involved."""
    return [compute_reward(sample.outcome) for sample in batch], 0


def _fatal(exc: BackendError) -> bool:
    return isinstance(exc, (UnknownTaskError, UnknownCheckpointError))


def _backend_failure(sample: SampleRecord) -> bool:
    trace = sample.outcome.error_trace if sample.outcome else None
    return bool(trace) and trace.startswith(BACKEND_FAILURE)


def _failed_batch(
    task_id: int, K: int, seed: int, reason: str, trials: int
) -> List[SampleRecord]:
    outcome = EvalOutcome.failed(f"{BACKEND_FAILURE}: {reason}", trials=trials)
    return [
        SampleRecord(
            task_id=task_id,
            seed=seed,
            sample_index=index,
            code="",
            token_count=1,
            total_logprob=0.0,
            outcome=outcome,
        )
        for index in range(K)
    ]


def collect_rollouts(
    policy: Policy,
    evaluator: Evaluator,
    checkpoint: CheckpointRef,
    tasks: Sequence[int],
    K: int,
    seed: int,
    step: int = 0,
    temperature: float = 0.25,
    max_tokens: int = 1024,
    workers: int = 1,
) -> List[SampleRecord]:
    """Draw ``K`` samples per task from ``checkpoint`` and evaluate them.

    Records come back grouped by task in ``tasks`` order. A transient backend
    failure turns the affected rollouts into failed outcomes; they still
    count against the budget.
    """
    trials = evaluator.profile.trials_default
    batches = []
    for task_id in tasks:
        request = SampleBatchRequest(
            checkpoint=checkpoint,
            task_id=task_id,
            K=K,
            temperature=temperature,
            max_tokens=max_tokens,
            seed=seed,
            step=step,
        )
        try:
            batches.append(policy.draw_samples(request))
        except BackendError as exc:
            if _fatal(exc):
                raise
            campaign_log.warning(
                "Sampling task %d at step %d failed: %s. Counting %d failed "
                "rollouts.",
                task_id,
                step,
                exc,
                K,
            )
            batches.append(_failed_batch(task_id, K, seed, str(exc), trials))

    pending = [s for batch in batches for s in batch if not s.evaluated]
    try:
        evaluated = iter(evaluator.evaluate_samples(pending, workers=workers))
    except BackendError as exc:
        if _fatal(exc):
            raise
        campaign_log.warning(
            "Evaluation at step %d failed: %s. Counting the batch as failed.",
            step,
            exc,
        )
        failed = EvalOutcome.failed(f"{BACKEND_FAILURE}: {exc}", trials=trials)
        evaluated = iter(s.with_outcome(failed) for s in pending)

    return [
        sample if sample.evaluated else next(evaluated)
        for batch in batches
        for sample in batch
    ]


def best_of_adaptation(trajectory: Sequence[TrajectoryStep]) -> TrajectoryStep:
    """Highest ``aggregate_fast1``; ties go to the earliest step."""
    if not trajectory:
        raise EmptyInputError("empty trajectory")
    return max(trajectory, key=lambda row: (row.aggregate_fast1, -row.step))


def early_stop_index(scores: Sequence[float], patience: int) -> int:
    """Index of the last step an early-stopped run executes.

    The run halts once ``patience`` consecutive scores fall below the best
    score seen so far.
    """
    if patience < 1:
        raise ParameterOutOfRangeError(f"patience must be >= 1, got {patience}")
    if not scores:
        raise EmptyInputError("no scores")
    best = scores[0]
    regressions = 0
    for index, score in enumerate(scores[1:], start=1):
        if score < best:
            regressions += 1
            if regressions >= patience:
                return index
        else:
            best = score
            regressions = 0
    return len(scores) - 1


def run_boa(
    tasks: Sequence[int],
    checkpoint0: CheckpointRef,
    steps: int,
    K: int,
    learning_rate: float,
    policy: Policy,
    evaluator: Evaluator,
    seed: int = 42,
    temperature: float = 0.25,
    max_tokens: int = 1024,
    workers: int = 1,
    patience: Optional[int] = None,
    initial_rollouts: Optional[Sequence[SampleRecord]] = None,
    reward_fn: RewardFn = speedup_rewards,
    sink: Optional[StepSink] = None,
) -> BoaResult:
    """Best-of-Adaptation with in-batch validation.

    Step 0 scores ``checkpoint0`` on a fresh evaluation batch, or on
    ``initial_rollouts`` when given. Each later step updates the previous
    checkpoint on the previous step's batch, then scores the new checkpoint
    on its own batch; no held-out evaluation is spent. The selected
    checkpoint maximizes the score, earliest step on ties. With ``patience``
    the loop halts after that many consecutive steps below the running best.

    Raises:
        ParameterOutOfRangeError: ``steps`` or ``patience`` below 1.
    """
    if steps < 1:
        raise ParameterOutOfRangeError(f"steps must be >= 1, got {steps}")
    if patience is not None and patience < 1:
        raise ParameterOutOfRangeError(f"patience must be >= 1, got {patience}")

    started = time.monotonic()
    draw = dict(
        tasks=tasks,
        K=K,
        seed=seed,
        temperature=temperature,
        max_tokens=max_tokens,
        workers=workers,
    )

    checkpoint = checkpoint0
    if initial_rollouts is not None:
        batch = list(initial_rollouts)
    else:
        batch = collect_rollouts(policy, evaluator, checkpoint, step=0, **draw)

    trajectory: List[TrajectoryStep] = []
    ledger = BudgetLedger()
    best = None
    regressions = 0
    stopped_early = False

    for step in range(steps + 1):
        if step > 0:
            rewards, teacher_tokens = reward_fn(checkpoint, batch)
            rollouts = [
                ScoredRollout(sample=sample, reward=reward)
                for sample, reward in zip(batch, rewards)
            ]
            outcome = policy.adapt(checkpoint, rollouts, learning_rate)
            ledger = ledger + BudgetLedger(teacher_tokens=teacher_tokens)
            checkpoint = outcome.new_checkpoint
            batch = collect_rollouts(policy, evaluator, checkpoint, step=step, **draw)

        if sink is not None:
            sink(step, checkpoint, batch)
        ledger = ledger + BudgetLedger(
            rollouts=len(batch),
            student_tokens=sum(s.token_count for s in batch),
        )
        score = fast1_rate(batch)
        trajectory.append(
            TrajectoryStep(
                step=step,
                checkpoint=checkpoint,
                cumulative_rollouts=ledger.rollouts,
                aggregate_fast1=score,
                per_task_fast1=per_task_fast1(batch),
                failed_rollouts=sum(1 for s in batch if _backend_failure(s)),
            )
        )
        campaign_log.info(
            "Step %d (seed %d): fast_1 %.1f%% over %d rollouts, checkpoint %s.",
            step,
            seed,
            100 * score,
            len(batch),
            checkpoint.id,
        )

        if patience is not None:
            if best is None or score >= best:
                best = score
                regressions = 0
            else:
                regressions += 1
                if regressions >= patience:
                    stopped_early = step < steps
                    break

    ledger = ledger + BudgetLedger(wall_clock=time.monotonic() - started)
    selected = best_of_adaptation(trajectory)
    campaign_log.info(
        "Best-of-Adaptation selected step %d (%.1f%%).",
        selected.step,
        100 * selected.aggregate_fast1,
    )
    return BoaResult(
        trajectory=trajectory,
        selected=selected,
        ledger=ledger,
        stopped_early=stopped_early,
    )


def run_boa_early_stop(
    tasks: Sequence[int],
    checkpoint0: CheckpointRef,
    steps: int,
    K: int,
    learning_rate: float,
    policy: Policy,
    evaluator: Evaluator,
    patience: int = 1,
    **kwargs,
) -> BoaResult:
    return run_boa(
        tasks,
        checkpoint0,
        steps,
        K,
        learning_rate,
        policy,
        evaluator,
        patience=patience,
        **kwargs,
    )


def run_per_task(
    tasks: Sequence[int],
    checkpoint0: CheckpointRef,
    steps: int,
    K: int,
    learning_rate: float,
    policy: Policy,
    evaluator: Evaluator,
    **kwargs,
) -> Dict[int, BoaResult]:
    """Isolated adaptation: the same loop over a single-task batch per task."""
    return {
        task_id: run_boa(
            (task_id,),
            checkpoint0,
            steps,
            K,
            learning_rate,
            policy,
            evaluator,
            **kwargs,
        )
        for task_id in tasks
    }


def enforce_equal_budget(
    plan_a: CampaignConfig, plan_b: CampaignConfig
) -> BudgetCheck:
    """Check two plans spend the same compute from the same origin.

    ``delta`` is ``plan_b``'s rollout budget minus ``plan_a``'s.
    """
    violations = []
    delta = plan_b.rollout_budget - plan_a.rollout_budget
    if delta:
        violations.append(
            f"rollout budgets differ: {plan_a.rollout_budget} vs "
            f"{plan_b.rollout_budget} (delta {delta})"
        )
    if plan_a.temperature != plan_b.temperature:
        violations.append(
            f"temperature differs: {plan_a.temperature} vs {plan_b.temperature}"
        )
    if plan_a.max_tokens != plan_b.max_tokens:
        violations.append(
            f"max_tokens differs: {plan_a.max_tokens} vs {plan_b.max_tokens}"
        )
    if plan_a.checkpoint != plan_b.checkpoint:
        violations.append(
            f"checkpoint origin differs: {plan_a.checkpoint} vs {plan_b.checkpoint}"
        )
    return BudgetCheck(ok=not violations, violations=violations, delta=delta)


def cross_subset_transfer(
    adapted: CheckpointRef,
    eval_tasks: Sequence[int],
    K: int,
    policy: Policy,
    evaluator: Evaluator,
    baseline: Optional[CheckpointRef] = None,
    seed: int = 42,
    **kwargs,
) -> Tuple[TransferReport, List[SampleRecord]]:
    """fast_1 of ``K`` fresh samples per task from a checkpoint adapted elsewhere.

    With ``baseline`` the unadapted checkpoint is scored on the same tasks.

    Raises:
        OverlapDetectedError: An eval task is in the checkpoint's lineage.
    """
    overlap = sorted(set(eval_tasks) & set(adapted.adapted_on))
    if overlap:
        raise OverlapDetectedError(
            f"checkpoint {adapted.id} was adapted on eval tasks {overlap}"
        )

    records = collect_rollouts(
        policy, evaluator, adapted, eval_tasks, K, seed, **kwargs
    )
    report = dict(
        checkpoint_id=adapted.id,
        adapted_on=list(adapted.adapted_on),
        eval_tasks=list(eval_tasks),
        K=K,
        per_task_fast1=per_task_fast1(records),
        aggregate_fast1=fast1_rate(records),
    )
    if baseline is not None:
        reference = collect_rollouts(
            policy, evaluator, baseline, eval_tasks, K, seed, **kwargs
        )
        records = records + reference
        report.update(
            baseline_id=baseline.id,
            baseline_per_task_fast1=per_task_fast1(reference),
            baseline_aggregate_fast1=fast1_rate(reference),
        )
    campaign_log.info(
        "Transfer of %s to tasks %s: fast_1 %.2f%%.",
        adapted.id,
        list(eval_tasks),
        100 * report["aggregate_fast1"],
    )
    return TransferReport(**report), records


def trajectory_from_batches(
    batches: Sequence[Sequence[SampleRecord]], root_id: str = "base"
) -> BoaResult:
    """Rebuild a scored trajectory from persisted per-step batches.

    Checkpoint ids are placeholders; records do not carry them.

    Raises:
        EmptyInputError: No batches, or an empty batch.
    """
    if not batches or any(not batch for batch in batches):
        raise EmptyInputError("trajectory needs one non-empty batch per step")
    checkpoint = CheckpointRef(id=root_id)
    trajectory = []
    ledger = BudgetLedger()
    for step, batch in enumerate(batches):
        if step > 0:
            checkpoint = checkpoint.child(f"{root_id}-step{step}")
        ledger = ledger + BudgetLedger(
            rollouts=len(batch),
            student_tokens=sum(s.token_count for s in batch),
        )
        trajectory.append(
            TrajectoryStep(
                step=step,
                checkpoint=checkpoint,
                cumulative_rollouts=ledger.rollouts,
                aggregate_fast1=fast1_rate(batch),
                per_task_fast1=per_task_fast1(batch),
                failed_rollouts=sum(1 for s in batch if _backend_failure(s)),
            )
        )
    return BoaResult(
        trajectory=trajectory,
        selected=best_of_adaptation(trajectory),
        ledger=ledger,
    )


def deficit_by_coverage(
    base: Sequence[SampleRecord],
    runs: Sequence[BoaResult],
    threshold: float = COVERAGE_THRESHOLD,
) -> DeficitReport:
    """Per-task fast_1 of Best-of-Adaptation minus that of Best-of-N.

    The Best-of-N side is each task's fast_1 rate over ``base``. The BoA side
    is the task's rate at the selected step, averaged over the runs that
    adapted on it, so joint runs and per-task runs mix freely. Tasks missing
    from either side are skipped.

    Raises:
        ParameterOutOfRangeError: ``threshold`` is outside [0, 1].
        EmptyInputError: No run, or no task on both sides.
    """
    if not 0 <= threshold <= 1:
        raise ParameterOutOfRangeError(f"coverage threshold {threshold} not in [0, 1]")
    if not runs:
        raise EmptyInputError("deficit needs at least one adaptation run")
    base_rates = per_task_fast1(base)
    boa: Dict[int, List[float]] = {}
    for run in runs:
        for task_id, rate in run.selected.per_task_fast1.items():
            boa.setdefault(task_id, []).append(rate)

    skipped = sorted(set(base_rates) ^ set(boa))
    if skipped:
        campaign_log.warning("Tasks %s are on one side only; skipped.", skipped)
    tasks = [
        TaskDeficit(
            task_id=task_id,
            base_fast1=base_rates[task_id],
            boa_fast1=sum(boa[task_id]) / len(boa[task_id]),
            band=CoverageBand.COVERED
            if base_rates[task_id] > threshold
            else CoverageBand.SPARSE,
        )
        for task_id in sorted(set(base_rates) & set(boa))
    ]
    if not tasks:
        raise EmptyInputError("no task appears in both the base and the runs")
    report = DeficitReport(threshold=threshold, runs=len(runs), tasks=tasks)
    for band in CoverageBand:
        mean = report.mean_deficit(band)
        if mean is not None:
            campaign_log.info(
                "%s tasks: mean BoA deficit %+.1f points.", band.value, 100 * mean
            )
    return report
