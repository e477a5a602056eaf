from __future__ import annotations

import math
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy import stats

from ttcompute import logger
from ttcompute.core.objects import SampleRecord
from ttcompute.evaluator.module import is_fast1
from ttcompute.exceptions import (
    EmptyInputError,
    InputError,
    InsufficientSamplesError,
    ParameterOutOfRangeError,
)
from ttcompute.scaling.objects import (
    CIMethod,
    EquivalentK,
    EquivalentKKind,
    ScalingCurve,
    ScalingPoint,
)

campaign_log = logger.Campaign.logger("scaling")

BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_MIN_SEEDS = 3


def fast1_rate(samples: Sequence[SampleRecord]) -> float:
    """Fraction of samples that are correct and faster than the reference."""
    if not samples:
        raise EmptyInputError("fast_1 rate of an empty sample set")
    fast = sum(1 for s in samples if s.evaluated and is_fast1(s.outcome))
    return fast / len(samples)


def correctness_rate(samples: Sequence[SampleRecord]) -> float:
    if not samples:
        raise EmptyInputError("correctness rate of an empty sample set")
    return sum(1 for s in samples if s.correct) / len(samples)


def mean_correct_speedup(samples: Sequence[SampleRecord]) -> float:
    """Mean speedup over correct samples; 0 when none is correct."""
    if not samples:
        raise EmptyInputError("mean speedup of an empty sample set")
    speedups = [s.speedup for s in samples if s.correct]
    return float(np.mean(speedups)) if speedups else 0.0


def success_at_k(n: int, c: int, k: int) -> float:
    """Probability that ``k`` draws without replacement hit a fast sample.

    ``1 - C(n - c, k) / C(n, k)`` in the product form, given ``c`` fast
    samples among ``n``.

    Raises:
        ParameterOutOfRangeError: Unless ``0 <= c <= n`` and ``1 <= k <= n``.
    """
    if not (0 <= c <= n) or not (1 <= k <= n):
        raise ParameterOutOfRangeError(
            f"need 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )
    if n - c < k:
        return 1.0
    return float(1.0 - np.prod(1.0 - k / np.arange(n - c + 1, n + 1)))


def _cells(
    groups: Mapping[Tuple[int, int], Sequence[SampleRecord]], ks: Sequence[int]
) -> Dict[Tuple[int, int], Tuple[int, int]]:
    need = max(ks)
    cells = {}
    for key, samples in sorted(groups.items()):
        if len(samples) < need:
            raise InsufficientSamplesError(
                f"task {key[0]} seed {key[1]} has {len(samples)} samples, "
                f"K={need} needs at least that many"
            )
        fast = sum(1 for s in samples if s.evaluated and is_fast1(s.outcome))
        cells[key] = (len(samples), fast)
    return cells


def build_curve(
    groups: Mapping[Tuple[int, int], Sequence[SampleRecord]],
    ks: Iterable[int] = (1, 2, 4, 8, 16, 32, 64),
    ci_method: CIMethod = CIMethod.RANGE,
    bootstrap_seed: int = 0,
) -> ScalingCurve:
    """Best-of-N scaling curve from samples grouped by ``(task_id, seed)``.

    At each K the success probability is averaged over tasks within a seed,
    then mean and population std are taken over seeds. The range interval is
    the min and max over (task, seed) cells. The bootstrap interval resamples
    per-seed means and needs at least three seeds; with fewer the range is
    used.

    Raises:
        EmptyInputError: ``groups`` is empty.
        InsufficientSamplesError: A cell has fewer samples than ``max(ks)``.
    """
    ks = sorted(set(ks))
    if not groups or not ks:
        raise EmptyInputError("scaling curve needs samples and K values")
    cells = _cells(groups, ks)
    seeds = sorted({seed for _, seed in cells})
    tasks = sorted({task for task, _ in cells})

    method = CIMethod(ci_method)
    if method == CIMethod.BOOTSTRAP and len(seeds) < BOOTSTRAP_MIN_SEEDS:
        campaign_log.warning(
            "Bootstrap interval needs %d seeds, got %d; using the range.",
            BOOTSTRAP_MIN_SEEDS,
            len(seeds),
        )
        method = CIMethod.RANGE

    points = []
    for K in ks:
        success = {key: success_at_k(n, c, K) for key, (n, c) in cells.items()}
        per_seed = np.array(
            [
                np.mean([v for (_, seed), v in success.items() if seed == s])
                for s in seeds
            ]
        )
        if method == CIMethod.BOOTSTRAP:
            result = stats.bootstrap(
                (per_seed,),
                np.mean,
                n_resamples=BOOTSTRAP_RESAMPLES,
                method="percentile",
                random_state=np.random.default_rng(bootstrap_seed),
            )
            low = float(result.confidence_interval.low)
            high = float(result.confidence_interval.high)
        else:
            low, high = min(success.values()), max(success.values())
        points.append(
            ScalingPoint(
                K=K,
                mean=float(per_seed.mean()),
                std=float(per_seed.std()),
                ci_low=low,
                ci_high=high,
            )
        )
    return ScalingCurve(
        points=points, ci_method=method, seeds=len(seeds), tasks=len(tasks)
    )


def equivalent_k(curve: ScalingCurve, target: float) -> EquivalentK:
    """Best-of-N budget whose success rate matches ``target``.

    Piecewise-linear in ``(log2 K, mean)``; on a flat stretch the smallest K
    reaching ``target`` wins.

    Raises:
        EmptyInputError: The curve has no points.
    """
    if not curve.points:
        raise EmptyInputError("equivalent K on an empty curve")
    ks, means = curve.ks, curve.means
    if target < means[0]:
        return EquivalentK(kind=EquivalentKKind.BELOW_K1, target=target)
    if target > means[-1]:
        return EquivalentK(kind=EquivalentKKind.ABOVE_KMAX, target=target)

    for i, mean in enumerate(means):
        if mean == target or (i == 0 and mean >= target):
            return EquivalentK(kind=EquivalentKKind.VALUE, target=target, K=ks[i])
        if mean > target:
            lo, hi = math.log2(ks[i - 1]), math.log2(ks[i])
            frac = (target - means[i - 1]) / (mean - means[i - 1])
            return EquivalentK(
                kind=EquivalentKKind.VALUE,
                target=target,
                K=2.0 ** (lo + frac * (hi - lo)),
            )
    return EquivalentK(kind=EquivalentKKind.VALUE, target=target, K=ks[-1])


def saturation_k(curve: ScalingCurve, epsilon: float) -> int:
    """Smallest K whose gain to the next grid point is below ``epsilon``.

    Returns the last K when no step qualifies.
    """
    if len(curve.points) < 2:
        raise InputError("saturation needs at least two curve points")
    ks, means = curve.ks, curve.means
    for i in range(len(ks) - 1):
        if means[i + 1] - means[i] < epsilon:
            return ks[i]
    return ks[-1]


def per_task_fast1(samples: Iterable[SampleRecord]) -> Dict[int, float]:
    groups: Dict[int, List[SampleRecord]] = {}
    for sample in samples:
        groups.setdefault(sample.task_id, []).append(sample)
    return {task_id: fast1_rate(group) for task_id, group in sorted(groups.items())}
