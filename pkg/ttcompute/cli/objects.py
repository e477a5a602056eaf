from __future__ import annotations

import datetime
import enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class ExitCode(enum.IntEnum):
    OK = 0
    CONFIG_ERROR = 2
    BACKEND_ERROR = 3
    ANALYSIS_ERROR = 4


class AnalysisKind(str, enum.Enum):
    SCALING = "scaling"
    EQUIVALENT_K = "equivalent_k"
    SELECTION = "selection"
    TRAJECTORY = "trajectory"
    REGIME = "regime"
    QUARTILE = "quartile"
    LENGTH = "length"
    PROBE = "probe"
    LEDGER = "ledger"
    DEFICIT = "deficit"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class RunManifest(BaseModel):
    """What a campaign produced and where it put it.

    Attributes:
        campaign_id: Config name plus mode.
        config: Snapshot of the validated config.
        backends: Policy and evaluator profiles in effect.
        seeds: Seeds the campaign covers.
        created: UTC creation time.
        artifacts: Artifact kind to paths relative to the run directory.
        record_counts: Lines per record file.
        complete: False when the campaign stopped on an error.
        error: The error that stopped it.
    """

    model_config = ConfigDict(frozen=True)

    campaign_id: str
    config: Dict[str, Any]
    backends: Dict[str, Any]
    seeds: List[int]
    created: str = Field(default_factory=_now)
    artifacts: Dict[str, List[str]] = Field(default_factory=dict)
    record_counts: Dict[str, int] = Field(default_factory=dict)
    complete: bool = False
    error: Optional[str] = None

    @property
    def records_total(self) -> int:
        return sum(self.record_counts.values())

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / "manifest.json"
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @staticmethod
    def read(run_dir: Path) -> RunManifest:
        path = Path(run_dir) / "manifest.json"
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
