"""Run-record files: one evaluated SampleRecord per line, JSON encoded.

Field names and their order are fixed by :data:`RECORD_FIELDS`.
"""

from __future__ import annotations

import json
import threading
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Union

from ttcompute.core.objects import RECORD_FIELDS, SampleRecord
from ttcompute.exceptions import EmptyInputError, InputError

PathLike = Union[str, Path]


def encode(record: SampleRecord) -> str:
    data = record.dump()
    return json.dumps({name: data[name] for name in RECORD_FIELDS}, ensure_ascii=False)


def decode(line: str) -> SampleRecord:
    return SampleRecord.from_dump(json.loads(line))


class RecordWriter:
    """Single writer for one run-record file.

    Appends from worker threads are serialized; records land in call order.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.count = 0
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def append(self, records: Iterable[SampleRecord]) -> int:
        lines = [encode(record) + "\n" for record in records]
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.writelines(lines)
            self.count += len(lines)
        return len(lines)


def write_records(path: PathLike, records: Iterable[SampleRecord]) -> int:
    writer = RecordWriter(path)
    return writer.append(records)


def read_records(path: PathLike) -> List[SampleRecord]:
    with open(path, encoding="utf-8") as handle:
        return [decode(line) for line in handle if line.strip()]


def read_many(paths: Iterable[PathLike]) -> List[SampleRecord]:
    """Read every file in ``paths``; directories contribute their ``*.jsonl``."""
    records = []
    for path in paths:
        path = Path(path)
        files = sorted(path.rglob("*.jsonl")) if path.is_dir() else [path]
        for file in files:
            records.extend(read_records(file))
    if not records:
        raise EmptyInputError("no run records found")
    check_unique_keys(records)
    return records


def check_unique_keys(records: Iterable[SampleRecord]) -> None:
    """Raise :class:`InputError` when a ``(task_id, seed, sample_index)`` repeats.

    Every step of an adaptive run reuses the same keys, so pooling step
    files would merge distinct batches into one group.
    """
    seen = set()
    for record in records:
        key = (record.task_id, record.seed, record.sample_index)
        if key in seen:
            raise InputError(
                f"record key (task {key[0]}, seed {key[1]}, sample {key[2]}) "
                "appears more than once; pass one step file per run"
            )
        seen.add(key)


def count_lines(path: PathLike) -> int:
    with open(path, encoding="utf-8") as handle:
        return sum(1 for line in handle if line.strip())


def group_by_task(records: Iterable[SampleRecord]) -> Dict[int, List[SampleRecord]]:
    groups: Dict[int, List[SampleRecord]] = defaultdict(list)
    for record in records:
        groups[record.task_id].append(record)
    return dict(sorted(groups.items()))


def group_by_task_seed(
    records: Iterable[SampleRecord],
) -> Dict[tuple, List[SampleRecord]]:
    """Group records by ``(task_id, seed)``, samples in index order.

    Raises:
        InputError: A ``(task_id, seed, sample_index)`` key repeats, as when
            several step files of one adaptive run are pooled.
    """
    records = list(records)
    check_unique_keys(records)
    groups: Dict[tuple, List[SampleRecord]] = defaultdict(list)
    for record in records:
        groups[(record.task_id, record.seed)].append(record)
    for group in groups.values():
        group.sort(key=lambda r: r.sample_index)
    return dict(sorted(groups.items()))
