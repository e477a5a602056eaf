from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ttcompute import logger
from ttcompute.core.objects import SampleRecord, SelectionStrategy
from ttcompute.core.records import group_by_task, group_by_task_seed
from ttcompute.evaluator.module import Evaluator, is_fast1
from ttcompute.evaluator.utils import mix64
from ttcompute.exceptions import EmptyInputError, InputError, TooFewSamplesError
from ttcompute.selection.objects import (
    TOP3_CANDIDATES,
    QuartileBucket,
    Regime,
    RegimeLabel,
    SelectionResult,
    StrategySummary,
)
from ttcompute.stats.objects import PairedComparison

campaign_log = logger.Campaign.logger("selection")


def _by_surprisal(sample: SampleRecord) -> Tuple[float, int]:
    return (sample.total_logprob, sample.sample_index)


def _by_confidence(sample: SampleRecord) -> Tuple[float, int]:
    return (-sample.total_logprob, sample.sample_index)


def _fastest(candidates: Iterable[SampleRecord]) -> SampleRecord:
    return min(candidates, key=lambda s: (-s.speedup, s.sample_index))


def random_correct_index(rng_seed: int, task_id: int, count: int) -> int:
    """Uniform index into ``count`` correct samples, keyed by seed and task."""
    rng = np.random.Generator(np.random.Philox(key=mix64(rng_seed, task_id)))
    return int(rng.integers(count))


def select(
    strategy: SelectionStrategy,
    samples: Sequence[SampleRecord],
    rng_seed: int,
    evaluator: Optional[Evaluator] = None,
    retime: bool = False,
    trials: Optional[int] = None,
) -> SelectionResult:
    """Pick one sample of a task's Best-of-N set.

    Only correct samples are eligible. Ties on logprob or speedup go to the
    lowest ``sample_index``. ``surprisal_guided_top3`` times its three
    candidates: recorded outcomes are reused unless ``retime`` is set and an
    ``evaluator`` is given; both ways it reports three extra evaluations.

    Raises:
        EmptyInputError: ``samples`` is empty.
        InputError: Samples from more than one task, or unevaluated samples.
    """
    if not samples:
        raise EmptyInputError("cannot select from an empty sample set")
    task_ids = {s.task_id for s in samples}
    if len(task_ids) != 1:
        raise InputError(f"samples span several tasks: {sorted(task_ids)}")
    if any(not s.evaluated for s in samples):
        raise InputError("selection needs evaluated samples")
    task_id = samples[0].task_id
    seed = samples[0].seed

    correct = sorted((s for s in samples if s.correct), key=lambda s: s.sample_index)
    if not correct:
        campaign_log.debug("Task %d has no correct sample.", task_id)
        return SelectionResult(strategy=strategy, task_id=task_id, seed=seed)

    extra_evals = 0
    if strategy == SelectionStrategy.ORACLE_BEST_CORRECT:
        chosen = _fastest(correct)
    elif strategy == SelectionStrategy.RANDOM_CORRECT:
        chosen = correct[random_correct_index(rng_seed, task_id, len(correct))]
    elif strategy == SelectionStrategy.CONFIDENCE_GUIDED:
        chosen = min(correct, key=_by_confidence)
    elif strategy == SelectionStrategy.SURPRISAL_GUIDED:
        chosen = min(correct, key=_by_surprisal)
    elif strategy == SelectionStrategy.SURPRISAL_GUIDED_TOP3:
        candidates = sorted(correct, key=_by_surprisal)[:TOP3_CANDIDATES]
        if retime and evaluator is not None:
            candidates = [evaluator.evaluate_sample(s, trials) for s in candidates]
        extra_evals = len(candidates)
        chosen = _fastest(candidates)
        if not chosen.correct:
            return SelectionResult(
                strategy=strategy,
                task_id=task_id,
                seed=seed,
                extra_evals_used=extra_evals,
            )
    else:
        raise InputError(f"unknown selection strategy {strategy!r}")

    return SelectionResult(
        strategy=strategy,
        task_id=task_id,
        seed=seed,
        chosen=chosen,
        extra_evals_used=extra_evals,
        fast1=is_fast1(chosen.outcome),
        speedup=chosen.speedup,
    )


def select_all(
    records: Iterable[SampleRecord],
    strategies: Sequence[SelectionStrategy],
    rng_seed: Optional[int] = None,
    evaluator: Optional[Evaluator] = None,
    retime: bool = False,
) -> List[SelectionResult]:
    """Apply every strategy to every (task, seed) group.

    ``random_correct`` is keyed by ``rng_seed`` when given, otherwise by the
    group's own campaign seed.
    """
    results = []
    for (task_id, seed), group in group_by_task_seed(records).items():
        for strategy in strategies:
            results.append(
                select(
                    strategy,
                    group,
                    rng_seed if rng_seed is not None else seed,
                    evaluator=evaluator,
                    retime=retime,
                )
            )
    return results


def aggregate(results: Iterable[SelectionResult]) -> List[StrategySummary]:
    """Per-strategy fast_1 and mean speedup; failures count as 0.

    fast_1 is the per-seed fraction of tasks, averaged over seeds.
    """
    by_strategy: Dict[SelectionStrategy, List[SelectionResult]] = {}
    for result in results:
        by_strategy.setdefault(result.strategy, []).append(result)

    summaries = []
    for strategy in SelectionStrategy:
        rows = by_strategy.get(strategy)
        if not rows:
            continue
        seeds = sorted({r.seed for r in rows})
        per_seed = np.array(
            [np.mean([r.fast1 for r in rows if r.seed == seed]) for seed in seeds]
        )
        summaries.append(
            StrategySummary(
                strategy=strategy,
                fast1=float(per_seed.mean()),
                fast1_std=float(per_seed.std()),
                mean_speedup=float(np.mean([r.speedup for r in rows])),
                failures=sum(1 for r in rows if r.chosen is None),
                extra_evals=sum(r.extra_evals_used for r in rows),
                units=len(rows),
            )
        )
    return summaries


def detect_regime(
    samples: Sequence[SampleRecord],
    threshold: float = 1.0,
    min_samples: int = 8,
) -> RegimeLabel:
    """Label a task by the population std of its samples' total logprob.

    Raises:
        TooFewSamplesError: Fewer than ``min_samples`` samples.
    """
    if len(samples) < min_samples:
        raise TooFewSamplesError(
            f"regime detection needs {min_samples} samples, got {len(samples)}"
        )
    std = float(np.std([s.total_logprob for s in samples]))
    return RegimeLabel(
        task_id=samples[0].task_id,
        logprob_std=std,
        threshold=threshold,
        label=Regime.HIGH_VARIANCE if std > threshold else Regime.LOW_VARIANCE,
    )


def regimes(
    records: Iterable[SampleRecord], threshold: float = 1.0, min_samples: int = 8
) -> Dict[int, Optional[RegimeLabel]]:
    """Regime per task over all of its samples; ``None`` when too few."""
    labels: Dict[int, Optional[RegimeLabel]] = {}
    for task_id, group in group_by_task(records).items():
        try:
            labels[task_id] = detect_regime(group, threshold, min_samples)
        except TooFewSamplesError:
            labels[task_id] = None
    return labels


def quartile_breakdown(samples: Iterable[SampleRecord]) -> List[QuartileBucket]:
    """Split the pooled correct samples into four surprisal quartiles.

    Samples are sorted by ascending total logprob, so Q1 holds the highest
    surprisal. Bucket sizes differ by at most one, larger buckets first.

    Raises:
        TooFewSamplesError: Fewer than four correct samples.
    """
    pool = sorted(
        (s for s in samples if s.correct),
        key=lambda s: (s.total_logprob, s.task_id, s.seed, s.sample_index),
    )
    if len(pool) < 4:
        raise TooFewSamplesError(
            f"quartiles need 4 correct samples, got {len(pool)}"
        )

    buckets = []
    for quartile, indices in enumerate(np.array_split(np.arange(len(pool)), 4), 1):
        bucket = [pool[i] for i in indices]
        buckets.append(
            QuartileBucket(
                quartile=quartile,
                size=len(bucket),
                fast1_rate=float(np.mean([is_fast1(s.outcome) for s in bucket])),
                mean_speedup=float(np.mean([s.speedup for s in bucket])),
                median_token_count=float(np.median([s.token_count for s in bucket])),
                logprob_low=bucket[0].total_logprob,
                logprob_high=bucket[-1].total_logprob,
            )
        )
    return buckets


def compare_strategies(
    records: Iterable[SampleRecord],
    strategy_a: SelectionStrategy,
    strategy_b: SelectionStrategy,
    rng_seed: Optional[int] = None,
) -> PairedComparison:
    """Pair two strategies' picks over (task, seed) units.

    Pair values are the chosen speedups (0 for a failed pick). A unit is
    discordant when exactly one of the two picks is fast_1.
    """
    results = select_all(records, (strategy_a, strategy_b), rng_seed=rng_seed)
    pairs = []
    wins_a = discordant = 0
    for a, b in zip(results[::2], results[1::2]):
        pairs.append((f"{a.task_id}:{a.seed}", a.speedup, b.speedup))
        if a.fast1 != b.fast1:
            discordant += 1
            wins_a += int(a.fast1)
    return PairedComparison(pairs=pairs, wins_a=wins_a, discordant=discordant)


def regime_win_counts(
    records: Sequence[SampleRecord],
    strategy_a: SelectionStrategy,
    strategy_b: SelectionStrategy,
    rng_seed: Optional[int] = None,
    threshold: float = 1.0,
) -> Dict[Optional[Regime], Tuple[int, int]]:
    """Discordant fast_1 wins ``(a, b)`` split by the task's regime."""
    labels = regimes(records, threshold)
    results = select_all(records, (strategy_a, strategy_b), rng_seed=rng_seed)

    counts: Dict[Optional[Regime], List[int]] = {}
    for a, b in zip(results[::2], results[1::2]):
        label = labels.get(a.task_id)
        regime = label.label if label is not None else None
        tally = counts.setdefault(regime, [0, 0])
        if a.fast1 and not b.fast1:
            tally[0] += 1
        elif b.fast1 and not a.fast1:
            tally[1] += 1
    return {regime: (wins[0], wins[1]) for regime, wins in counts.items()}
