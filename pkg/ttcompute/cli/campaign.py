"""End-to-end execution of one campaign config.

Run directory layout::

    records/seed42/step0.jsonl           one file per step and seed
    records/seed42/task4/step0.jsonl     per_task_ttt
    records/seed42/transfer.jsonl        transfer runs
    trajectory_seed42.csv, probe_seed42.csv, nll_seed42.csv, ...
    ledger.json, ledger.csv, manifest.json
"""

from __future__ import annotations

import json
import time
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ttcompute import logger
from ttcompute.adaptation.module import (
    collect_rollouts,
    cross_subset_transfer,
    run_boa,
    speedup_rewards,
)
from ttcompute.adaptation.objects import BoaResult, BudgetLedger, SdpoVariant
from ttcompute.adaptation.sdpo import SdpoRewarder
from ttcompute.cli import exports
from ttcompute.cli.objects import RunManifest
from ttcompute.core.config import CampaignConfig, Mode, planned_rollouts
from ttcompute.core.objects import CheckpointRef, SampleRecord
from ttcompute.core.records import RecordWriter, group_by_task_seed
from ttcompute.evaluator.module import create_evaluator
from ttcompute.exceptions import TTComputeError
from ttcompute.policy.module import create_policy
from ttcompute.policy.scenario import load_scenario
from ttcompute.scaling.module import build_curve
from ttcompute.selection.module import aggregate, regimes, select_all
from ttcompute.stats.probe import anticalibration_probe

campaign_log = logger.Campaign.logger("cli")

SDPO_VARIANTS = {
    Mode.SDPO_FEEDBACK: SdpoVariant.FEEDBACK,
    Mode.SDPO_PROMPT_ONLY: SdpoVariant.PROMPT_ONLY,
}


class Campaign:
    """Owns one run directory and the backends of one config."""

    def __init__(self, config: CampaignConfig, run_dir: Path):
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

        scenario = load_scenario(config.scenario)
        task_ids = tuple(config.task_ids) + tuple(config.adapt_tasks)
        baseline_times = scenario.baseline_times(task_ids)
        for task in config.tasks:
            if "baseline_time" in task.model_fields_set:
                baseline_times[task.task_id] = task.baseline_time

        self.policy = create_policy(
            config.policy, scenario, task_ids, root_id=config.checkpoint
        )
        self.evaluator = create_evaluator(config.evaluator, baseline_times)
        self.origin = self.policy.root(config.checkpoint)

        self.artifacts: Dict[str, List[str]] = defaultdict(list)
        self.writers: Dict[str, RecordWriter] = {}
        self.ledgers: List[Dict[str, object]] = []

    @property
    def campaign_id(self) -> str:
        return f"{self.config.name}-{self.config.mode.value}"

    def _draw(self) -> dict:
        return dict(
            temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
            workers=self.config.workers,
        )

    def _artifact(self, kind: str, path: Path) -> None:
        relative = str(Path(path).relative_to(self.run_dir))
        if relative not in self.artifacts[kind]:
            self.artifacts[kind].append(relative)

    def _persist(self, relative: str, records: Sequence[SampleRecord]) -> None:
        writer = self.writers.get(relative)
        if writer is None:
            writer = self.writers[relative] = RecordWriter(self.run_dir / relative)
            self._artifact("records", writer.path)
        writer.append(records)

    def _sink(self, prefix: str):
        def sink(step: int, checkpoint: CheckpointRef, batch) -> None:
            self._persist(f"{prefix}/step{step}.jsonl", batch)

        return sink

    def _ledger(self, arm: str, seed: object, ledger: BudgetLedger) -> None:
        self.ledgers.append(exports.ledger_row(arm, seed, ledger))

    def manifest(self, complete: bool, error: Optional[str] = None) -> RunManifest:
        return RunManifest(
            campaign_id=self.campaign_id,
            config=self.config.dump(),
            backends={
                "policy": self.config.policy.model_dump(mode="json"),
                "evaluator": self.config.evaluator.model_dump(mode="json"),
                "scenario": self.config.scenario,
            },
            seeds=list(self.config.seeds),
            artifacts=dict(self.artifacts),
            record_counts={name: w.count for name, w in self.writers.items()},
            complete=complete,
            error=error,
        )

    def run(self) -> RunManifest:
        """Execute every seed, then write the ledger and manifest.

        A failure keeps whatever was already written and marks the manifest
        incomplete before re-raising.
        """
        config = self.config
        campaign_log.info(
            "Campaign %s: %d tasks, K=%d, %d seeds, %d rollouts per seed.",
            self.campaign_id,
            len(config.tasks),
            config.K,
            len(config.seeds),
            planned_rollouts(config),
        )
        try:
            if config.mode == Mode.BEST_OF_N:
                self._best_of_n()
            else:
                for seed in config.seeds:
                    self._adaptive(seed)
        except TTComputeError as exc:
            campaign_log.error("Campaign %s stopped: %s", self.campaign_id, exc)
            self._write_ledger()
            self.manifest(complete=False, error=str(exc)).write(self.run_dir)
            raise
        finally:
            self.policy.close()
            self.evaluator.close()

        self._write_ledger()
        manifest = self.manifest(complete=True)
        manifest.write(self.run_dir)
        campaign_log.info(
            "Campaign %s complete: %d records in %d files.",
            self.campaign_id,
            manifest.records_total,
            len(manifest.record_counts),
        )
        return manifest

    def _write_ledger(self) -> None:
        if not self.ledgers:
            return
        path = self.run_dir / "ledger.json"
        path.write_text(json.dumps(self.ledgers, indent=2), encoding="utf-8")
        self._artifact("ledger", path)
        self._artifact(
            "ledger", exports.export_ledger(self.run_dir / "ledger.csv", self.ledgers)
        )

    def _best_of_n(self) -> None:
        config = self.config
        records: List[SampleRecord] = []
        started = {}
        for seed in config.seeds:
            started[seed] = time.monotonic()
            batch = collect_rollouts(
                self.policy,
                self.evaluator,
                self.origin,
                config.task_ids,
                config.K,
                seed,
                **self._draw(),
            )
            self._persist(f"records/seed{seed}/step0.jsonl", batch)
            records.extend(batch)
            started[seed] = time.monotonic() - started[seed]

        results = select_all(
            records,
            config.strategy_list,
            evaluator=self.evaluator,
            retime=config.top3_retime,
        )
        for seed, elapsed in started.items():
            batch = [r for r in records if r.seed == seed]
            self._ledger(
                "best_of_n",
                seed,
                BudgetLedger(
                    rollouts=len(batch),
                    student_tokens=sum(r.token_count for r in batch),
                    extra_timing_evals=sum(
                        r.extra_evals_used for r in results if r.seed == seed
                    ),
                    wall_clock=elapsed,
                ),
            )

        labels = regimes(records)
        self._artifact(
            "reports",
            exports.export_selection(self.run_dir / "selection.csv", results, labels),
        )
        self._artifact(
            "reports",
            exports.export_summary(self.run_dir / "summary.csv", aggregate(results)),
        )
        ks = [k for k in config.scaling_ks if k <= config.K]
        if ks:
            curve = build_curve(group_by_task_seed(records), ks, config.ci_method)
            self._artifact(
                "reports", exports.export_curve(self.run_dir / "scaling.csv", curve)
            )

    def _adaptive(self, seed: int) -> None:
        config = self.config
        options = dict(
            seed=seed, patience=config.patience, reward_fn=speedup_rewards
        )
        options.update(self._draw())
        if config.mode in SDPO_VARIANTS:
            options["reward_fn"] = SdpoRewarder(
                self.policy, config.beta, SDPO_VARIANTS[config.mode]
            )

        if config.mode == Mode.PER_TASK_TTT:
            for task_id in config.task_ids:
                result = run_boa(
                    (task_id,),
                    self.origin,
                    config.steps,
                    config.K,
                    config.learning_rate,
                    self.policy,
                    self.evaluator,
                    sink=self._sink(f"records/seed{seed}/task{task_id}"),
                    **options,
                )
                self._ledger(f"per_task_ttt/task{task_id}", seed, result.ledger)
                self._trajectory(result, f"trajectory_seed{seed}_task{task_id}.csv")
            return

        tasks = config.adapt_tasks or config.task_ids
        initial = None
        if config.mode == Mode.PROBE:
            initial = collect_rollouts(
                self.policy,
                self.evaluator,
                self.origin,
                tasks,
                config.K,
                seed,
                **self._draw(),
            )
        result = run_boa(
            tasks,
            self.origin,
            config.steps,
            config.K,
            config.learning_rate,
            self.policy,
            self.evaluator,
            initial_rollouts=initial,
            sink=self._sink(f"records/seed{seed}"),
            **options,
        )
        self._ledger(config.mode.value, seed, result.ledger)
        self._trajectory(result, f"trajectory_seed{seed}.csv")

        if config.mode == Mode.PROBE:
            self._probe(seed, initial, result)
        if config.adapt_tasks:
            self._transfer(seed, result)

    def _trajectory(self, result: BoaResult, name: str) -> None:
        self._artifact(
            "trajectories", exports.export_trajectory(self.run_dir / name, result)
        )

    def _probe(
        self, seed: int, samples: Sequence[SampleRecord], result: BoaResult
    ) -> None:
        report = anticalibration_probe(
            samples,
            [row.checkpoint for row in result.trajectory],
            self.policy,
            tail_fraction=self.config.tail_fraction,
            workers=self.config.workers,
        )
        self._artifact(
            "reports",
            exports.export_probe(
                self.run_dir / f"probe_seed{seed}.csv",
                exports.probe_rows(report, seed),
                report.tail_fraction,
            ),
        )
        self._artifact(
            "reports",
            exports.export_nll(
                self.run_dir / f"nll_seed{seed}.csv", report, samples, seed
            ),
        )

    def _transfer(self, seed: int, result: BoaResult) -> None:
        started = time.monotonic()
        report, records = cross_subset_transfer(
            result.selected.checkpoint,
            self.config.task_ids,
            self.config.K,
            self.policy,
            self.evaluator,
            baseline=self.origin,
            seed=seed,
            **self._draw(),
        )
        self._persist(f"records/seed{seed}/transfer.jsonl", records)
        self._ledger(
            "transfer",
            seed,
            BudgetLedger(
                rollouts=len(records),
                student_tokens=sum(r.token_count for r in records),
                wall_clock=time.monotonic() - started,
            ),
        )
        self._artifact(
            "reports",
            exports.export_transfer(
                self.run_dir / f"transfer_seed{seed}.csv", report, seed
            ),
        )
