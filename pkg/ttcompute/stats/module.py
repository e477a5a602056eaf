"""Rank correlations, effect sizes and exact small-sample tests.

Every p-value is labelled: correlations are two-sided, the sign test is
one-sided, signed-rank results carry both.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy import stats

from ttcompute.core.objects import SampleRecord
from ttcompute.exceptions import (
    DegenerateInputError,
    LengthMismatchError,
    ParameterOutOfRangeError,
    TooFewSamplesError,
)
from ttcompute.stats.objects import (
    Correlation,
    LengthControl,
    Transform,
    WilcoxonResult,
)

EXACT_SPEARMAN_MAX_N = 10
EXACT_WILCOXON_MAX_N = 20
MIN_SIGNED_RANK_PAIRS = 5
PERMUTATION_BATCH = 200_000


def _clip(rho: float) -> float:
    return float(min(1.0, max(-1.0, rho)))


def _check_pair(x: Sequence[float], y: Sequence[float], minimum: int):
    if len(x) != len(y):
        raise LengthMismatchError(f"inputs differ in length: {len(x)} != {len(y)}")
    if len(x) < minimum:
        raise TooFewSamplesError(f"need at least {minimum} pairs, got {len(x)}")
    for name, values in (("x", x), ("y", y)):
        if np.ptp(np.asarray(values, dtype=float)) == 0:
            raise DegenerateInputError(f"{name} is constant")


def spearman(x: Sequence[float], y: Sequence[float]) -> Correlation:
    """Spearman rank correlation with average ranks for ties.

    The two-sided p-value is exact, by enumerating all pairings, for
    ``n <= 10`` and the t-approximation above.

    Raises:
        LengthMismatchError: ``x`` and ``y`` differ in length.
        TooFewSamplesError: Fewer than three pairs.
        DegenerateInputError: Either input is constant.
    """
    _check_pair(x, y, 3)
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)
    result = stats.spearmanr(rx, ry)
    rho = _clip(result.statistic)
    n = len(rx)

    if n > EXACT_SPEARMAN_MAX_N:
        p = 1.0 if math.isnan(result.pvalue) else float(result.pvalue)
        return Correlation(rho=rho, p=min(1.0, p), n=n)

    cy = ry - ry.mean()
    scale = np.sqrt(np.sum((rx - rx.mean()) ** 2) * np.sum(cy**2))

    def statistic(ranks, axis=-1):
        centered = ranks - np.mean(ranks, axis=axis, keepdims=True)
        return np.sum(centered * cy, axis=axis) / scale

    exact = stats.permutation_test(
        (rx,),
        statistic,
        permutation_type="pairings",
        vectorized=True,
        n_resamples=np.inf,
        batch=PERMUTATION_BATCH,
        alternative="two-sided",
    )
    return Correlation(rho=rho, p=min(1.0, float(exact.pvalue)), n=n, exact=True)


def partial_spearman(
    x: Sequence[float], y: Sequence[float], z: Sequence[float]
) -> Correlation:
    """Spearman correlation of ``x`` and ``y`` controlling for ``z``.

    ``r_xy.z = (r_xy - r_xz r_yz) / sqrt((1 - r_xz^2)(1 - r_yz^2))``; the
    p-value uses the t-distribution with ``n - 3`` degrees of freedom.

    Raises:
        DegenerateInputError: ``z`` is constant or perfectly rank-correlated
            with ``x`` or ``y``.
    """
    _check_pair(x, y, 4)
    _check_pair(x, z, 4)
    r_xy = spearman(x, y).rho
    r_xz = spearman(x, z).rho
    r_yz = spearman(y, z).rho
    denominator = (1.0 - r_xz**2) * (1.0 - r_yz**2)
    if denominator <= 1e-12:
        raise DegenerateInputError("control is perfectly correlated with an input")

    rho = _clip((r_xy - r_xz * r_yz) / math.sqrt(denominator))
    n = len(x)
    if abs(rho) == 1.0:
        return Correlation(rho=rho, p=0.0, n=n)
    t = rho * math.sqrt((n - 3) / (1.0 - rho**2))
    p = float(2.0 * stats.t.sf(abs(t), n - 3))
    return Correlation(rho=rho, p=min(1.0, p), n=n)


def cohens_h(p1: float, p2: float) -> float:
    """Cohen's h: ``2 asin sqrt(p1) - 2 asin sqrt(p2)``."""
    for p in (p1, p2):
        if not 0.0 <= p <= 1.0:
            raise ParameterOutOfRangeError(f"proportion {p} is outside [0, 1]")
    return 2.0 * math.asin(math.sqrt(p1)) - 2.0 * math.asin(math.sqrt(p2))


def exact_sign_test(wins: int, discordant: int) -> float:
    """One-sided ``P(X >= wins)`` for ``X ~ Binomial(discordant, 1/2)``."""
    if not 0 <= wins <= discordant:
        raise ParameterOutOfRangeError(
            f"need 0 <= wins <= discordant, got {wins} and {discordant}"
        )
    if discordant == 0:
        return 1.0
    return float(stats.binomtest(wins, discordant, 0.5, alternative="greater").pvalue)


def _differences(
    pairs: Iterable[Tuple[float, float]], transform: Transform
) -> np.ndarray:
    a, b = (np.asarray(column, dtype=float) for column in zip(*pairs))
    if Transform(transform) == Transform.LOG_RATIO:
        if np.any(a <= 0) or np.any(b <= 0):
            raise DegenerateInputError("log ratio needs strictly positive values")
        return np.log(a / b)
    return a - b


def signed_rank_null(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Null counts of ``2 W+`` over all ``2^n`` sign assignments.

    Ranks are doubled so average ranks of ties stay integral.
    """
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[: len(counts) - rank]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(
    pairs: Sequence[Tuple[float, float]],
    transform: Transform = Transform.IDENTITY,
) -> WilcoxonResult:
    """Wilcoxon signed-rank test of paired values ``(a, b)``.

    Zero differences are dropped and tied magnitudes share average ranks.
    With at most 20 non-zero differences the null distribution is exact;
    above that the normal approximation with tie correction is used.

    Raises:
        TooFewSamplesError: Fewer than five non-zero differences.
        DegenerateInputError: ``log_ratio`` on a non-positive value.
    """
    if not pairs:
        raise TooFewSamplesError("no pairs")
    diffs = _differences(pairs, transform)
    diffs = diffs[diffs != 0]
    n = len(diffs)
    if n < MIN_SIGNED_RANK_PAIRS:
        raise TooFewSamplesError(
            f"need {MIN_SIGNED_RANK_PAIRS} non-zero differences, got {n}"
        )

    ranks = stats.rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = signed_rank_null(doubled)
        total = float(2**n)
        observed = int(round(2 * w_plus))
        upper = counts[observed:].sum() / total
        lower = counts[: observed + 1].sum() / total
        exact = True
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        variance = n * (n + 1) * (2 * n + 1) / 24.0
        variance -= np.sum(tie_counts**3 - tie_counts) / 48.0
        z = (w_plus - mean) / math.sqrt(variance)
        upper = float(stats.norm.sf(z))
        lower = float(stats.norm.cdf(z))
        exact = False

    return WilcoxonResult(
        statistic=min(w_plus, w_minus),
        w_plus=w_plus,
        w_minus=w_minus,
        n=n,
        p_one_sided=float(min(1.0, upper)),
        p_two_sided=float(min(1.0, 2.0 * min(upper, lower))),
        exact=exact,
    )


def length_control_report(samples: Iterable[SampleRecord]) -> LengthControl:
    """Logprob-speedup correlation, raw and controlled for token count.

    Computed over correct samples only. When every correct sample has the
    same length the control is uninformative: the partial correlation equals
    the raw one and the length correlation is omitted.

    Raises:
        TooFewSamplesError: Fewer than four correct samples.
    """
    correct = [s for s in samples if s.correct]
    if len(correct) < 4:
        raise TooFewSamplesError(
            f"length control needs 4 correct samples, got {len(correct)}"
        )
    logprob = [s.total_logprob for s in correct]
    speedup = [s.speedup for s in correct]
    length = [s.token_count for s in correct]

    raw = spearman(logprob, speedup)
    if np.ptp(length) == 0:
        return LengthControl(
            logprob_speedup=raw,
            logprob_speedup_given_length=raw,
            length_speedup=None,
            n=len(correct),
        )
    try:
        controlled = partial_spearman(logprob, speedup, length)
    except DegenerateInputError:
        controlled = None
    return LengthControl(
        logprob_speedup=raw,
        logprob_speedup_given_length=controlled,
        length_speedup=spearman(length, speedup),
        n=len(correct),
    )
