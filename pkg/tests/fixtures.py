"""Record builders shared by the test modules."""

from typing import Dict, List, Sequence, Tuple

import numpy as np

from ttcompute.core.objects import CheckpointRef, EvalOutcome, SampleRecord
from ttcompute.policy.module import Policy
from ttcompute.policy.objects import SampleBatchRequest

SUBSET1 = (4, 5, 12, 14, 15)
SUBSET2 = (18, 28, 29, 30, 32)


def outcome(speedup: float = 1.5, correct: bool = True, compiled: bool = True):
    if not correct:
        return EvalOutcome(compiled=compiled, correct=False)
    return EvalOutcome(
        compiled=True, correct=True, speedup=speedup, runtime=1.0 / speedup
    )


def record(
    task_id: int = 4,
    sample_index: int = 0,
    logprob: float = -50.0,
    speedup: float = 1.5,
    correct: bool = True,
    seed: int = 42,
    tokens: int = 100,
    evaluated: bool = True,
) -> SampleRecord:
    return SampleRecord(
        task_id=task_id,
        seed=seed,
        sample_index=sample_index,
        code=f"// task {task_id} seed {seed} sample {sample_index}",
        token_count=tokens,
        total_logprob=logprob,
        outcome=outcome(speedup, correct) if evaluated else None,
    )


# fast_1 counts out of 64 per (task, seed); K=1 averages 53.3%.
SCALING_COUNTS = {
    (4, 42): 16,
    (5, 42): 18,
    (12, 42): 30,
    (14, 42): 40,
    (15, 42): 56,
    (4, 43): 16,
    (5, 43): 24,
    (12, 43): 36,
    (14, 43): 45,
    (15, 43): 60,
}


def scaling_records(n: int = 64) -> List[SampleRecord]:
    records = []
    for (task_id, seed), fast in SCALING_COUNTS.items():
        for index in range(n):
            records.append(
                record(
                    task_id,
                    index,
                    logprob=-40.0 - index,
                    speedup=1.5 if index < fast else 0.8,
                    seed=seed,
                )
            )
    return records


# Per unit: surprisal pick speedup, confidence pick speedup.
HEAD_TO_HEAD_UNITS = {
    42: [(1.35, 1.5), (2.0, 1.5), (2.9, 0.9), (3.9, 0.9), (0.85, 0.9)],
    43: [(1.3, 1.5), (2.3, 1.5), (2.7, 1.5), (4.9, 0.9), (0.8, 0.9)],
}


def head_to_head_records() -> List[SampleRecord]:
    """Five tasks by two seeds with a fixed surprisal vs confidence outcome.

    Oracle and top-3 reach 100% fast_1, surprisal 80%, confidence 50%.
    """
    records = []
    for seed, units in HEAD_TO_HEAD_UNITS.items():
        for task_id, (surprisal, confidence) in zip(SUBSET1, units):
            samples = [
                (-60.0, surprisal, True),
                (-55.0, 4.0, True),
                (-40.0, 0.5, True),
                (-20.0, confidence, True),
                (-90.0, 0.0, False),
            ]
            for index, (logprob, speedup, correct) in enumerate(samples):
                records.append(
                    record(task_id, index, logprob, speedup, correct, seed=seed)
                )
    return records


# (size, fast_1 count, token count) per surprisal quartile.
QUARTILES = ((58, 28, 7), (58, 47, 8), (57, 41, 10), (57, 25, 15))


def quartile_records() -> List[SampleRecord]:
    records = []
    index = 0
    for quartile, (size, fast, tokens) in enumerate(QUARTILES):
        for i in range(size):
            records.append(
                record(
                    task_id=SUBSET1[index % 5],
                    sample_index=index,
                    logprob=-1000.0 + 100 * quartile + i,
                    speedup=1.5 if i < fast else 0.9,
                    tokens=tokens,
                )
            )
            index += 1
    return records


def regime_records() -> List[SampleRecord]:
    """Twenty tasks: nine with logprob std 2.0, seven with 0.1, four with 0.5."""
    stds = [2.0] * 9 + [0.1] * 7 + [0.5] * 4
    records = []
    for task_id, std in enumerate(stds, start=100):
        for index in range(16):
            sign = 1 if index % 2 else -1
            records.append(
                record(task_id, index, logprob=-50.0 + sign * std, speedup=1.1)
            )
    return records


# Aggregate fast_1 per step of one batch adaptation run, 80 rollouts a step.
TRAJECTORY_FAST = (30, 32, 34, 29, 29, 33)


def trajectory_batches(per_step: int = 80) -> List[List[SampleRecord]]:
    batches = []
    for fast in TRAJECTORY_FAST:
        batches.append(
            [
                record(
                    SUBSET1[i % 5],
                    i // 5,
                    speedup=1.5 if i < fast else 0.7,
                )
                for i in range(per_step)
            ]
        )
    return batches


def coverage_batch(fast: Dict[int, int], n: int = 8) -> List[SampleRecord]:
    """``n`` samples per task, the first ``fast[task]`` of them fast_1."""
    return [
        record(task_id, i, speedup=1.5 if i < count else 0.8)
        for task_id, count in fast.items()
        for i in range(n)
    ]


class ScriptedPolicy(Policy):
    """Returns pre-evaluated samples with a fixed fast_1 count per task.

    ``fast`` maps a checkpoint id to ``{task_id: count}``.
    """

    def __init__(self, fast: Dict[str, Dict[int, int]]):
        super().__init__()
        self.fast = fast
        self.requests: List[SampleBatchRequest] = []

    def root(self, checkpoint_id: str) -> CheckpointRef:
        return CheckpointRef(id=checkpoint_id)

    def draw_samples(self, request: SampleBatchRequest) -> List[SampleRecord]:
        self.requests.append(request)
        fast = self.fast[request.checkpoint.id].get(request.task_id, 0)
        return [
            record(
                request.task_id,
                index,
                logprob=-30.0 - index,
                speedup=1.4 if index < fast else 0.6,
                seed=request.seed,
            )
            for index in range(request.K)
        ]


def spread(total: int, parts: Sequence[int]) -> Tuple[int, ...]:
    """Split ``total`` over ``len(parts)`` tasks as evenly as possible."""
    base, extra = divmod(total, len(parts))
    return tuple(base + (1 if i < extra else 0) for i in range(len(parts)))


# Rank fixtures with a chosen Spearman rho. Sample i always has the i-th
# lowest speedup, so a column's rho is set by the order of its ranks.


def swapped(n: int, deficit: int) -> List[int]:
    """A permutation of ``range(n)`` made of disjoint nested swaps.

    Swapping positions ``i < j`` of the identity lowers ``sum(k * p[k])`` by
    ``(j - i) ** 2``; the greedy pass over ever shorter swaps stops within
    14 of ``deficit``. ``p[k] + p[n - 1 - k] == n - 1`` for every ``k``.
    """
    order = list(range(n))
    left = deficit
    for i in range(n // 2):
        j = n - 1 - i
        if (j - i) ** 2 <= left:
            order[i], order[j] = order[j], order[i]
            left -= (j - i) ** 2
    return order


def rank_deficit(n: int, rho: float) -> int:
    """Lowering of ``sum(k * p[k])`` below the identity that gives ``rho``."""
    return round((1.0 - rho) * n * (n * n - 1) / 12)


def ranked(n: int, rho: float) -> List[int]:
    return swapped(n, rank_deficit(n, rho))


def length_study_records(
    n: int = 550, rho: float = -0.047, length_rho: float = -0.039
) -> List[SampleRecord]:
    """Correct samples whose logprob and token count track speedup by rank."""
    logprob = ranked(n, rho)
    length = ranked(n, length_rho)
    return [
        record(
            sample_index=i,
            logprob=-80.0 + 0.05 * logprob[i],
            speedup=0.5 + 0.01 * i,
            tokens=400 + length[i],
        )
        for i in range(n)
    ]


def mirrored_length_records(n: int = 550, rho: float = 0.003) -> List[SampleRecord]:
    """Like ``length_study_records`` with lengths symmetric about the middle.

    Mirrored lengths are rank-uncorrelated with speedup and with logprob, so
    controlling for them leaves the logprob correlation unchanged.
    """
    logprob = ranked(n, rho)
    return [
        record(
            sample_index=i,
            logprob=-80.0 + 0.05 * logprob[i],
            speedup=0.5 + 0.01 * i,
            tokens=400 + min(i, n - 1 - i),
        )
        for i in range(n)
    ]


def factorial_records(n: int = 200, seed: int = 7) -> List[SampleRecord]:
    """Speedup, logprob and length from three balanced factors.

    Level values are random; every pair of factors is crossed evenly, so
    every pairwise rank correlation is exactly zero.
    """
    rng = np.random.default_rng(seed)
    speedup = rng.uniform(0.5, 3.0, 5)
    logprob = rng.uniform(-90.0, -30.0, 5)
    length = rng.integers(400, 1200, 8)
    return [
        record(
            sample_index=i,
            logprob=float(logprob[i % 5]),
            speedup=float(speedup[(i // 5) % 5]),
            tokens=int(length[i // 25]),
        )
        for i in range(n)
    ]


# rho_all, rho_tail and mean NLL of one fixed sample set per adaptation step.
ANTICALIBRATION_STEPS = {
    0: (-0.198, -0.237, 6.71),
    1: (-0.205, -0.301, 6.66),
    2: (-0.221, -0.377, 6.75),
    3: (-0.236, -0.442, 6.86),
    8: (-0.275, -0.430, 6.93),
}


def anticalibration_nll_row(
    rho_all: float, rho_tail: float, mean_nll: float, n: int = 320, tail: int = 80
) -> List[float]:
    """NLL per sample for one checkpoint.

    The ``tail`` slowest samples get the highest NLL, ordered among
    themselves for ``rho_tail``; the rest are ordered for ``rho_all``.
    """
    head = [n - tail + rank for rank in ranked(tail, rho_tail)]
    rest = list(range(n - tail))
    cross = sum(k * rank for k, rank in enumerate(head + rest))
    target = rho_all * n * (n * n - 1) / 12 + n * ((n - 1) / 2) ** 2
    ranks = head + swapped(n - tail, round(cross - target))
    return [mean_nll + 0.01 * (rank - (n - 1) / 2) for rank in ranks]


def anticalibration_samples(n: int = 320) -> List[SampleRecord]:
    return [
        record(sample_index=i, logprob=-50.0, speedup=0.2 + 0.01 * i)
        for i in range(n)
    ]
