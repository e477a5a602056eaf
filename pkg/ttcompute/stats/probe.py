"""Anti-calibration probe: one fixed sample set scored under many checkpoints."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ttcompute import logger
from ttcompute.core.objects import CheckpointRef, SampleRecord
from ttcompute.exceptions import DegenerateInputError, EmptyInputError, InputError
from ttcompute.policy.module import Policy
from ttcompute.stats.module import spearman
from ttcompute.stats.objects import ProbeResult, ProbeStep

campaign_log = logger.Campaign.logger("probe")

MIN_TAIL = 3


def nll_matrix(
    policy: Policy,
    checkpoints: Sequence[CheckpointRef],
    samples: Sequence[SampleRecord],
    workers: int = 1,
) -> List[List[float]]:
    """NLL of every sample under every checkpoint, one row per checkpoint.

    Any scoring failure propagates; a partial matrix is never returned.
    """
    cells = list(itertools.product(checkpoints, samples))

    def score(cell: Tuple[CheckpointRef, SampleRecord]) -> float:
        return policy.score_nll(*cell)

    if workers <= 1:
        flat = [score(cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(score, cells))
    width = len(samples)
    return [flat[i * width : (i + 1) * width] for i in range(len(checkpoints))]


def _tail_size(n: int, fraction: float) -> int:
    return min(n, max(MIN_TAIL, math.ceil(fraction * n)))


def _tail_rho(
    nll: np.ndarray, speedup: np.ndarray, index: np.ndarray, label: str, step: int
) -> Tuple[Optional[float], Optional[float]]:
    try:
        result = spearman(nll[index], speedup[index])
    except DegenerateInputError:
        campaign_log.warning(
            "Step %d %s tail is degenerate; correlation left undefined.", step, label
        )
        return None, None
    return result.rho, result.p


def anticalibration_probe(
    samples: Sequence[SampleRecord],
    checkpoints: Sequence[CheckpointRef],
    policy: Policy,
    tail_fraction: float = 0.25,
    workers: int = 1,
) -> ProbeResult:
    """Spearman correlation of NLL and speedup per checkpoint.

    The sample set is held fixed; only the scoring checkpoint varies. The
    tail is the ``tail_fraction`` of samples with the highest NLL under each
    checkpoint (at least three); the alternative tail takes the samples with
    the lowest speedup. A degenerate high-NLL tail reports ``rho_tail = 0``
    with ``p_tail = 1``.

    Raises:
        EmptyInputError: No samples or no checkpoints.
        InputError: A sample has not been evaluated.
        DegenerateInputError: Speedup or NLL is constant over the whole set.
    """
    if not samples or not checkpoints:
        raise EmptyInputError("probe needs samples and checkpoints")
    if any(not s.evaluated for s in samples):
        raise InputError("probe samples must carry evaluated speedups")
    if not 0 < tail_fraction <= 1:
        raise InputError(f"tail_fraction {tail_fraction} is outside (0, 1]")

    ordered = sorted(checkpoints, key=lambda c: c.step)
    matrix = nll_matrix(policy, ordered, samples, workers)
    speedup = np.array([s.speedup for s in samples], dtype=float)
    size = _tail_size(len(samples), tail_fraction)
    slowest = np.argsort(speedup, kind="stable")[:size]

    rows = []
    for checkpoint, values in zip(ordered, matrix):
        nll = np.array(values, dtype=float)
        overall = spearman(nll, speedup)
        surprising = np.argsort(-nll, kind="stable")[:size]
        step = checkpoint.step
        rho_tail, p_tail = _tail_rho(nll, speedup, surprising, "high-NLL", step)
        rho_slow, p_slow = _tail_rho(nll, speedup, slowest, "low-speedup", step)
        rows.append(
            ProbeStep(
                step=checkpoint.step,
                checkpoint_id=checkpoint.id,
                rho_all=overall.rho,
                p_all=overall.p,
                rho_tail=rho_tail if rho_tail is not None else 0.0,
                p_tail=p_tail if p_tail is not None else 1.0,
                mean_nll=float(nll.mean()),
                rho_tail_speedup=rho_slow,
                p_tail_speedup=p_slow,
            )
        )
        campaign_log.info(
            "Probe step %d: rho %.3f, tail rho %.3f, mean NLL %.2f.",
            checkpoint.step,
            overall.rho,
            rows[-1].rho_tail,
            rows[-1].mean_nll,
        )

    return ProbeResult(
        per_step=rows,
        tail_fraction=tail_fraction,
        sample_count=len(samples),
        nll=matrix,
    )
