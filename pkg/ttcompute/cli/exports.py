"""CSV exports behind the figures and tables.

Every file opens with ``#`` comment lines naming the method, sidedness and
thresholds used, then a header row.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

from ttcompute import __version__
from ttcompute.adaptation.objects import (
    BoaResult,
    BudgetLedger,
    CoverageBand,
    DeficitReport,
    TransferReport,
)
from ttcompute.exceptions import EmptyInputError
from ttcompute.scaling.module import BOOTSTRAP_RESAMPLES
from ttcompute.scaling.objects import CIMethod, EquivalentK, ScalingCurve
from ttcompute.selection.objects import (
    QuartileBucket,
    RegimeLabel,
    SelectionResult,
    StrategySummary,
)
from ttcompute.stats.objects import LengthControl, ProbeResult

SELECTION_FIELDS = (
    "task_id",
    "seed",
    "strategy",
    "chosen_sample_index",
    "fast1",
    "speedup",
    "extra_evals_used",
    "regime_label",
)
CURVE_FIELDS = ("K", "mean", "std", "ci_low", "ci_high")
# The range interval spans single (task, seed) cells, not per-seed means.
CI_DESCRIPTIONS = {
    CIMethod.RANGE: "min and max success over (task, seed) cells",
    CIMethod.BOOTSTRAP: "percentile bootstrap of per-seed means, "
    f"{BOOTSTRAP_RESAMPLES} resamples",
}
PROBE_FIELDS = (
    "seed",
    "step",
    "checkpoint_id",
    "rho_all",
    "p_all",
    "rho_tail",
    "p_tail",
    "mean_nll",
    "rho_tail_speedup",
    "p_tail_speedup",
)
LEDGER_FIELDS = (
    "arm",
    "seed",
    "rollouts",
    "student_tokens",
    "teacher_tokens",
    "total_tokens",
    "extra_timing_evals",
    "wall_clock",
)


def write_csv(
    path: Path,
    fields: Sequence[str],
    rows: Iterable[Mapping[str, object]],
    metadata: Optional[Mapping[str, object]] = None,
) -> Path:
    """Write ``rows`` under a metadata comment block.

    Raises:
        EmptyInputError: No rows; nothing is written.
    """
    rows = list(rows)
    if not rows:
        raise EmptyInputError(f"nothing to export to {path.name}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# tool: ttcompute {__version__}\n")
        for key, value in (metadata or {}).items():
            handle.write(f"# {key}: {value}\n")
        writer = csv.DictWriter(handle, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({name: _cell(row.get(name)) for name in fields})
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _cell(value: object) -> object:
    if value is None:
        return ""
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return f"{value:.6g}"
    return value


def selection_rows(
    results: Iterable[SelectionResult],
    regimes: Mapping[int, Optional[RegimeLabel]],
) -> List[Dict[str, object]]:
    rows = []
    for result in results:
        label = regimes.get(result.task_id)
        rows.append(
            {
                "task_id": result.task_id,
                "seed": result.seed,
                "strategy": result.strategy.value,
                "chosen_sample_index": result.chosen_sample_index,
                "fast1": result.fast1,
                "speedup": result.speedup,
                "extra_evals_used": result.extra_evals_used,
                "regime_label": label.label.value if label else "",
            }
        )
    return rows


def export_selection(
    path: Path,
    results: Sequence[SelectionResult],
    regimes: Mapping[int, Optional[RegimeLabel]],
    threshold: float = 1.0,
) -> Path:
    return write_csv(
        path,
        SELECTION_FIELDS,
        selection_rows(results, regimes),
        {"ties": "lowest sample_index", "regime_threshold": threshold},
    )


def export_summary(path: Path, summaries: Sequence[StrategySummary]) -> Path:
    fields = ("strategy", "fast1", "fast1_std", "mean_speedup", "failures")
    fields += ("extra_evals", "units")
    rows = [
        {**summary.model_dump(), "strategy": summary.strategy.value}
        for summary in summaries
    ]
    return write_csv(path, fields, rows, {"aggregate": "mean over seeds"})


def export_curve(
    path: Path, curve: ScalingCurve, equivalents: Sequence[EquivalentK] = ()
) -> Path:
    metadata = {
        "ci_method": curve.ci_method.value,
        "ci": CI_DESCRIPTIONS[curve.ci_method],
        "seeds": curve.seeds,
        "tasks": curve.tasks,
        "success": "at least one fast_1 in K draws without replacement",
    }
    for equivalent in equivalents:
        value = f"{equivalent.K:.4g}" if equivalent.K is not None else ""
        metadata[f"equivalent_k@{equivalent.target:g}"] = (
            f"{equivalent.kind.value} {value}".strip()
        )
    rows = [point.model_dump() for point in curve.points]
    return write_csv(path, CURVE_FIELDS, rows, metadata)


def export_trajectory(path: Path, result: BoaResult) -> Path:
    tasks = sorted({t for row in result.trajectory for t in row.per_task_fast1})
    fields = ["step", "cumulative_rollouts", "aggregate_fast1"]
    fields += [f"task_{task}" for task in tasks]
    rows = []
    for row in result.trajectory:
        data = {
            "step": row.step,
            "cumulative_rollouts": row.cumulative_rollouts,
            "aggregate_fast1": 100 * row.aggregate_fast1,
        }
        for task in tasks:
            value = row.per_task_fast1.get(task)
            data[f"task_{task}"] = 100 * value if value is not None else None
        rows.append(data)
    metadata = {
        "unit": "percent fast_1",
        "scoring": "in-batch",
        "selected_step": result.selected.step,
        "selection": "argmax, earliest step on ties",
        "stopped_early": result.stopped_early,
    }
    return write_csv(path, fields, rows, metadata)


def probe_rows(result: ProbeResult, seed: int) -> List[Dict[str, object]]:
    return [{"seed": seed, **row.model_dump()} for row in result.per_step]


def export_probe(path: Path, rows: Sequence[Mapping[str, object]], tail: float) -> Path:
    metadata = {
        "sidedness": "two_sided",
        "tail": f"highest-NLL {tail:g} of samples (rho_tail); "
        f"lowest-speedup {tail:g} (rho_tail_speedup)",
    }
    return write_csv(path, PROBE_FIELDS, rows, metadata)


def export_nll(path: Path, result: ProbeResult, samples: Sequence, seed: int) -> Path:
    rows = []
    for step, values in zip(result.per_step, result.nll):
        for sample, nll in zip(samples, values):
            rows.append(
                {
                    "seed": seed,
                    "step": step.step,
                    "checkpoint_id": step.checkpoint_id,
                    "task_id": sample.task_id,
                    "sample_index": sample.sample_index,
                    "nll": nll,
                }
            )
    fields = ("seed", "step", "checkpoint_id", "task_id", "sample_index", "nll")
    return write_csv(path, fields, rows, {"nll": "negative total logprob, nats"})


def ledger_row(arm: str, seed: object, ledger: BudgetLedger) -> Dict[str, object]:
    return {
        "arm": arm,
        "seed": seed,
        "total_tokens": ledger.total_tokens,
        **ledger.model_dump(),
    }


def export_ledger(path: Path, rows: Sequence[Mapping[str, object]]) -> Path:
    return write_csv(path, LEDGER_FIELDS, rows, {"wall_clock": "seconds"})


def export_regimes(
    path: Path, labels: Mapping[int, Optional[RegimeLabel]], threshold: float
) -> Path:
    rows = [
        {
            "task_id": task_id,
            "logprob_std": label.logprob_std if label else None,
            "label": label.label.value if label else "too_few_samples",
        }
        for task_id, label in sorted(labels.items())
    ]
    fields = ("task_id", "logprob_std", "label")
    return write_csv(path, fields, rows, {"threshold": threshold, "std": "population"})


def export_quartiles(path: Path, buckets: Sequence[QuartileBucket]) -> Path:
    fields = ("quartile", "size", "fast1_rate", "mean_speedup")
    fields += ("median_token_count", "logprob_low", "logprob_high")
    return write_csv(
        path,
        fields,
        [bucket.model_dump() for bucket in buckets],
        {"order": "ascending total_logprob; Q1 highest surprisal", "pool": "correct"},
    )


def export_length_control(path: Path, report: LengthControl) -> Path:
    rows = []
    for name, value in (
        ("logprob_speedup", report.logprob_speedup),
        ("logprob_speedup_given_length", report.logprob_speedup_given_length),
        ("length_speedup", report.length_speedup),
    ):
        rows.append(
            {
                "correlation": name,
                "rho": value.rho if value else None,
                "p": value.p if value else None,
                "n": report.n,
            }
        )
    return write_csv(
        path,
        ("correlation", "rho", "p", "n"),
        rows,
        {"method": "spearman; partial controls token_count", "sidedness": "two_sided"},
    )


def export_comparison(path: Path, rows: Sequence[Mapping[str, object]]) -> Path:
    fields = ("test", "statistic", "p", "sidedness", "n", "detail")
    return write_csv(path, fields, rows, {"pairs": "(task, seed) units"})


def export_transfer(path: Path, report: TransferReport, seed: int) -> Path:
    rows = []
    for task_id in report.eval_tasks:
        baseline = report.baseline_per_task_fast1 or {}
        rows.append(
            {
                "seed": seed,
                "task_id": task_id,
                "adapted_fast1": 100 * report.per_task_fast1.get(task_id, 0.0),
                "baseline_fast1": 100 * baseline[task_id]
                if task_id in baseline
                else None,
            }
        )
    rows.append(
        {
            "seed": seed,
            "task_id": "all",
            "adapted_fast1": 100 * report.aggregate_fast1,
            "baseline_fast1": 100 * report.baseline_aggregate_fast1
            if report.baseline_aggregate_fast1 is not None
            else None,
        }
    )
    return write_csv(
        path,
        ("seed", "task_id", "adapted_fast1", "baseline_fast1"),
        rows,
        {
            "checkpoint": report.checkpoint_id,
            "adapted_on": " ".join(map(str, report.adapted_on)),
            "K": report.K,
            "unit": "percent fast_1",
        },
    )


def export_deficit(path: Path, report: DeficitReport) -> Path:
    rows = [
        {
            "task_id": task.task_id,
            "band": task.band.value,
            "base_fast1": 100 * task.base_fast1,
            "boa_fast1": 100 * task.boa_fast1,
            "deficit": 100 * task.deficit,
        }
        for task in report.tasks
    ]
    for band in CoverageBand:
        mean = report.mean_deficit(band)
        if mean is not None:
            rows.append({"task_id": "mean", "band": band.value, "deficit": 100 * mean})
    return write_csv(
        path,
        ("task_id", "band", "base_fast1", "boa_fast1", "deficit"),
        rows,
        {
            "coverage_threshold": report.threshold,
            "boa": f"selected step, mean over {report.runs} runs",
            "unit": "percent fast_1",
        },
    )
