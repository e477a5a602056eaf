"""``ttcompute`` command line.

Subcommands::

    run      execute a campaign config end to end
    select   apply selection strategies to persisted records
    analyze  turn records or run artifacts into CSV tables
    probe    run a probe campaign with an optional tail override
    report   reconcile a run's ledger with its record files
"""

from __future__ import annotations

import argparse
import json
import re
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from pydantic import ValidationError

from ttcompute import __version__, logger
from ttcompute.adaptation.module import (
    COVERAGE_THRESHOLD,
    deficit_by_coverage,
    trajectory_from_batches,
)
from ttcompute.adaptation.objects import BudgetLedger
from ttcompute.cli import exports
from ttcompute.cli.campaign import Campaign
from ttcompute.cli.objects import AnalysisKind, ExitCode, RunManifest
from ttcompute.core.config import Mode, load_config
from ttcompute.core.objects import SampleRecord, SelectionStrategy
from ttcompute.core.records import (
    count_lines,
    group_by_task_seed,
    read_many,
    read_records,
)
from ttcompute.exceptions import (
    AnalysisError,
    BackendError,
    ConfigError,
    EmptyInputError,
    EmptyRolloutsError,
    InputError,
    TooFewSamplesError,
    UnknownAnalysisError,
)
from ttcompute.scaling.module import build_curve, equivalent_k
from ttcompute.selection.module import (
    aggregate,
    compare_strategies,
    quartile_breakdown,
    regimes,
    select_all,
)
from ttcompute.stats.module import (
    cohens_h,
    exact_sign_test,
    length_control_report,
    wilcoxon_signed_rank,
)

campaign_log = logger.Campaign.logger("cli")

DEFAULT_KS = (1, 2, 4, 8, 16, 32, 64)
STEP_FILE = re.compile(r"step(\d+)\.jsonl$")


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    first = Path(args.records[0])
    return first if first.is_dir() else first.parent


def _strategies(names: Optional[Sequence[str]]) -> List[SelectionStrategy]:
    if not names:
        return list(SelectionStrategy)
    try:
        return [SelectionStrategy(name) for name in names]
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _records(paths: Iterable[str]) -> List[SampleRecord]:
    try:
        return read_many(paths)
    except FileNotFoundError as exc:
        raise InputError(f"no such records path: {exc.filename}") from exc


def cmd_run(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seeds": [args.seed]})
    out_dir = Path(args.out_dir) if args.out_dir else Path("runs") / config.name
    Campaign(config, out_dir).run()


def cmd_probe(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if config.mode != Mode.PROBE:
        raise ConfigError(
            f"probe needs a config with mode probe, not {config.mode.value}"
        )
    update = {}
    if args.seed is not None:
        update["seeds"] = [args.seed]
    if args.tail_fraction is not None:
        if not 0 < args.tail_fraction <= 1:
            raise ConfigError(f"tail fraction {args.tail_fraction} is outside (0, 1]")
        update["tail_fraction"] = args.tail_fraction
    config = config.model_copy(update=update)
    out_dir = Path(args.out_dir) if args.out_dir else Path("runs") / config.name
    Campaign(config, out_dir).run()


def cmd_select(args: argparse.Namespace) -> None:
    records = _records(args.records)
    out_dir = _out_dir(args)
    results = select_all(records, _strategies(args.strategies), rng_seed=args.seed)
    exports.export_selection(out_dir / "selection.csv", results, regimes(records))
    summaries = aggregate(results)
    exports.export_summary(out_dir / "summary.csv", summaries)
    for summary in summaries:
        campaign_log.info(
            "%s: fast_1 %.1f%%, mean speedup %.2fx, %d failures.",
            summary.strategy.value,
            100 * summary.fast1,
            summary.mean_speedup,
            summary.failures,
        )


def _comparison_rows(
    records: Sequence[SampleRecord],
    strategy_a: SelectionStrategy,
    strategy_b: SelectionStrategy,
    rng_seed: Optional[int],
) -> List[dict]:
    comparison = compare_strategies(records, strategy_a, strategy_b, rng_seed)
    label = f"{strategy_a.value} vs {strategy_b.value}"
    n = len(comparison.pairs)
    rows = [
        {
            "test": "sign",
            "statistic": comparison.wins_a,
            "p": exact_sign_test(comparison.wins_a, comparison.discordant),
            "sidedness": "one_sided",
            "n": comparison.discordant,
            "detail": f"{label}: {comparison.wins_a}-{comparison.wins_b} "
            "discordant fast_1 wins",
        }
    ]

    fast_a = sum(1 for _, a, _ in comparison.pairs if a > 1.0) / n
    fast_b = sum(1 for _, _, b in comparison.pairs if b > 1.0) / n
    rows.append(
        {
            "test": "cohens_h",
            "statistic": cohens_h(fast_a, fast_b),
            "sidedness": "",
            "n": n,
            "detail": f"{label}: fast_1 {fast_a:.3f} vs {fast_b:.3f}",
        }
    )

    try:
        result = wilcoxon_signed_rank([(a, b) for _, a, b in comparison.pairs])
    except TooFewSamplesError as exc:
        campaign_log.warning("Skipping the signed-rank test: %s", exc)
        return rows
    for sidedness, p in (
        ("two_sided", result.p_two_sided),
        ("one_sided", result.p_one_sided),
    ):
        rows.append(
            {
                "test": "wilcoxon",
                "statistic": result.statistic,
                "p": p,
                "sidedness": sidedness,
                "n": result.n,
                "detail": f"{label}: W+ {result.w_plus:g}, W- {result.w_minus:g}, "
                f"{'exact' if result.exact else 'normal approximation'}",
            }
        )
    return rows


def _step_dirs(paths: Iterable[str]) -> List[Path]:
    found = []
    for path in map(Path, paths):
        if not path.is_dir():
            continue
        for directory in [path, *sorted(p for p in path.rglob("*") if p.is_dir())]:
            if any(STEP_FILE.search(f.name) for f in directory.glob("step*.jsonl")):
                found.append(directory)
    return found


def _step_batches(directory: Path) -> List[List[SampleRecord]]:
    files = sorted(
        (int(STEP_FILE.search(f.name).group(1)), f)
        for f in directory.glob("step*.jsonl")
        if STEP_FILE.search(f.name)
    )
    steps = [step for step, _ in files]
    if steps != list(range(len(steps))):
        raise InputError(f"{directory} has step files {steps}, expected 0..n")
    return [read_records(f) for _, f in files]


def _glob_rows(paths: Iterable[str], pattern: str) -> List[dict]:
    rows = []
    for path in map(Path, paths):
        for file in sorted(path.glob(pattern)) if path.is_dir() else []:
            rows.extend(exports.read_csv(file))
    return rows


def _analyze_trajectory(args: argparse.Namespace, out_dir: Path) -> None:
    directories = _step_dirs(args.records)
    if not directories:
        raise EmptyInputError("no per-step record files found")
    for directory in directories:
        result = trajectory_from_batches(_step_batches(directory))
        name = "_".join(
            part for part in directory.parts[-2:] if part != "records"
        )
        exports.export_trajectory(out_dir / f"trajectory_{name}.csv", result)
        campaign_log.info(
            "%s: best step %d at %.1f%%.",
            directory,
            result.selected.step,
            100 * result.selected.aggregate_fast1,
        )


def _analyze_deficit(args: argparse.Namespace, out_dir: Path) -> None:
    if not args.baseline:
        raise InputError("deficit needs Best-of-N records via --baseline")
    directories = _step_dirs(args.records)
    if not directories:
        raise EmptyInputError("no per-step record files found")
    runs = [trajectory_from_batches(_step_batches(d)) for d in directories]
    report = deficit_by_coverage(_records(args.baseline), runs, args.coverage)
    exports.export_deficit(out_dir / "deficit.csv", report)


def _analyze_ledger(args: argparse.Namespace, out_dir: Path) -> None:
    rows = []
    for path in map(Path, args.records):
        ledger_file = path / "ledger.json" if path.is_dir() else path
        if ledger_file.exists():
            rows.extend(json.loads(ledger_file.read_text(encoding="utf-8")))
    if not rows:
        raise EmptyInputError("no ledger.json found")
    fields = ("rollouts", "student_tokens", "teacher_tokens")
    fields += ("extra_timing_evals", "wall_clock")
    total = sum(
        (BudgetLedger(**{name: row[name] for name in fields}) for row in rows),
        BudgetLedger(),
    )
    rows.append(exports.ledger_row("total", "", total))
    exports.export_ledger(out_dir / "ledger.csv", rows)


def cmd_analyze(args: argparse.Namespace) -> None:
    try:
        kind = AnalysisKind(args.analysis)
    except ValueError:
        raise UnknownAnalysisError(
            f"unknown analysis {args.analysis!r}; expected one of "
            f"{', '.join(k.value for k in AnalysisKind)}"
        ) from None
    out_dir = _out_dir(args)

    if kind == AnalysisKind.TRAJECTORY:
        return _analyze_trajectory(args, out_dir)
    if kind == AnalysisKind.LEDGER:
        return _analyze_ledger(args, out_dir)
    if kind == AnalysisKind.DEFICIT:
        return _analyze_deficit(args, out_dir)
    if kind == AnalysisKind.PROBE:
        rows = _glob_rows(args.records, "probe_seed*.csv")
        tail = args.tail_fraction if args.tail_fraction is not None else 0.25
        exports.export_probe(out_dir / "probe.csv", rows, tail)
        return None

    records = _records(args.records)
    if kind in (AnalysisKind.SCALING, AnalysisKind.EQUIVALENT_K):
        groups = group_by_task_seed(records)
        smallest = min(len(group) for group in groups.values())
        ks = [k for k in DEFAULT_KS if k <= smallest]
        curve = build_curve(groups, ks, args.ci_method)
        if kind == AnalysisKind.SCALING:
            exports.export_curve(out_dir / "scaling.csv", curve)
            return None
        if not args.target:
            raise InputError("equivalent_k needs at least one --target")
        equivalents = [equivalent_k(curve, target) for target in args.target]
        rows = [
            {"target": e.target, "kind": e.kind.value, "K": e.K} for e in equivalents
        ]
        exports.write_csv(
            out_dir / "equivalent_k.csv",
            ("target", "kind", "K"),
            rows,
            {
                "ci_method": curve.ci_method.value,
                "ci": exports.CI_DESCRIPTIONS[curve.ci_method],
                "interpolation": "linear in log2 K",
            },
        )
    elif kind == AnalysisKind.SELECTION:
        strategies = _strategies(args.strategies) if args.strategies else [
            SelectionStrategy.SURPRISAL_GUIDED,
            SelectionStrategy.CONFIDENCE_GUIDED,
        ]
        if len(strategies) != 2:
            raise InputError("selection comparison needs exactly two strategies")
        exports.export_comparison(
            out_dir / "comparison.csv",
            _comparison_rows(records, *strategies, rng_seed=args.seed),
        )
    elif kind == AnalysisKind.REGIME:
        exports.export_regimes(
            out_dir / "regime.csv", regimes(records, args.threshold), args.threshold
        )
    elif kind == AnalysisKind.QUARTILE:
        exports.export_quartiles(out_dir / "quartile.csv", quartile_breakdown(records))
    elif kind == AnalysisKind.LENGTH:
        exports.export_length_control(
            out_dir / "length.csv", length_control_report(records)
        )
    return None


def cmd_report(args: argparse.Namespace) -> None:
    """Check that every persisted record is counted once and files are whole."""
    failures = 0
    for run_dir in map(Path, args.records):
        try:
            manifest = RunManifest.read(run_dir)
        except FileNotFoundError as exc:
            raise InputError(f"{run_dir} has no manifest.json") from exc
        rows = []
        for name, expected in sorted(manifest.record_counts.items()):
            path = run_dir / name
            actual = count_lines(path) if path.exists() else 0
            rows.append(
                {"check": f"lines {name}", "expected": expected, "actual": actual}
            )
        ledger_file = run_dir / "ledger.json"
        ledger = (
            json.loads(ledger_file.read_text(encoding="utf-8"))
            if ledger_file.exists()
            else []
        )
        rows.append(
            {
                "check": "ledger rollouts",
                "expected": manifest.records_total,
                "actual": sum(row["rollouts"] for row in ledger),
            }
        )
        rows.append(
            {"check": "complete", "expected": True, "actual": manifest.complete}
        )
        for row in rows:
            row["ok"] = row["expected"] == row["actual"]
            failures += not row["ok"]
        out_dir = Path(args.out_dir) if args.out_dir else run_dir
        exports.write_csv(
            out_dir / "report.csv",
            ("check", "expected", "actual", "ok"),
            rows,
            {"campaign": manifest.campaign_id, "created": manifest.created},
        )
        campaign_log.info(
            "%s: %d records, %d checks, %d failed.",
            manifest.campaign_id,
            manifest.records_total,
            len(rows),
            sum(not row["ok"] for row in rows),
        )
    if failures:
        raise AnalysisError(f"{failures} reconciliation checks failed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttcompute",
        description="Best-of-N versus test-time training campaigns and analyses.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="INFO")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="execute a campaign config")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir")
    run.add_argument("--seed", type=int)
    run.set_defaults(handler=cmd_run)

    probe = commands.add_parser("probe", help="run a probe campaign")
    probe.add_argument("--config", required=True)
    probe.add_argument("--out-dir")
    probe.add_argument("--seed", type=int)
    probe.add_argument("--tail-fraction", type=float)
    probe.set_defaults(handler=cmd_probe)

    select = commands.add_parser("select", help="apply selection strategies")
    select.add_argument("--records", nargs="+", required=True)
    select.add_argument("--out-dir")
    select.add_argument("--seed", type=int)
    select.add_argument("--strategies", nargs="+")
    select.set_defaults(handler=cmd_select)

    analyze = commands.add_parser("analyze", help="export analysis tables")
    analyze.add_argument("--records", nargs="+", required=True)
    analyze.add_argument("--analysis", required=True)
    analyze.add_argument("--out-dir")
    analyze.add_argument("--seed", type=int)
    analyze.add_argument("--strategies", nargs="+")
    analyze.add_argument("--ci-method", default="range", choices=("range", "bootstrap"))
    analyze.add_argument("--target", type=float, nargs="+")
    analyze.add_argument("--threshold", type=float, default=1.0)
    analyze.add_argument("--tail-fraction", type=float)
    analyze.add_argument("--baseline", nargs="+")
    analyze.add_argument("--coverage", type=float, default=COVERAGE_THRESHOLD)
    analyze.set_defaults(handler=cmd_analyze)

    report = commands.add_parser("report", help="reconcile ledgers and records")
    report.add_argument("--records", nargs="+", required=True)
    report.add_argument("--out-dir")
    report.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.setup(args.log_level)
    try:
        args.handler(args)
    except ConfigError as exc:
        campaign_log.error("Invalid config: %s", exc)
        return ExitCode.CONFIG_ERROR
    except BackendError as exc:
        campaign_log.error("Backend failure: %s", exc)
        return ExitCode.BACKEND_ERROR
    except (InputError, AnalysisError, EmptyRolloutsError, ValidationError) as exc:
        campaign_log.error("Analysis failed: %s", exc)
        return ExitCode.ANALYSIS_ERROR
    return ExitCode.OK
