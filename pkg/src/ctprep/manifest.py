"""Append-only JSON-Lines event log tracking every scan through the stages.

One event per line: scan_id, stage, payload, timestamp. Replaying the file
reconstructs the full in-memory state, which is what makes reruns skip
finished work and lets an interrupted batch pick up where it stopped. The
file is never rewritten; corrections are new events.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional

from .errors import CorruptManifest

STAGES = ("ingest", "triage", "convert", "register", "qc", "standardize", "done")
# events that annotate a record without advancing its stage
EVENT_REVIEW = "review"
EVENT_ERROR = "error"
_KNOWN_EVENTS = frozenset(STAGES) | {EVENT_REVIEW, EVENT_ERROR}


def stage_index(stage: str) -> int:
    return STAGES.index(stage)


@dataclass
class ScanRecord:
    """Accumulated state of one scan, folded from its events."""

    scan_id: str
    patient_id: str = ""
    source_paths: List[str] = field(default_factory=list)
    stage: str = "ingest"
    decision: str = ""        # triage outcome, possibly overridden by review
    reason: str = ""
    orientation: str = ""
    image_type: List[str] = field(default_factory=list)
    convolution_kernel: Optional[str] = None
    n_slices: Optional[int] = None
    age: Optional[int] = None
    volume_path: Optional[str] = None
    transform_path: Optional[str] = None
    resampled_path: Optional[str] = None
    registration_score: Optional[float] = None
    qc_cluster: Optional[int] = None
    qc_verdict: Optional[str] = None
    final_output_path: Optional[str] = None
    error: Optional[str] = None


_RECORD_FIELDS = frozenset(f.name for f in fields(ScanRecord))


class Manifest:
    """Event log bound to one file, with the folded records in memory.

    Appends are serialized by a lock so concurrent per-scan workers can
    share one manifest; each event is written as a single line.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.records: Dict[str, ScanRecord] = {}
        self.order: List[str] = []
        self.n_events = 0
        self._lock = threading.Lock()
        if self.path.exists():
            for event in _read_events(self.path):
                self._fold(event)

    def append(self, scan_id: str, stage: str, payload: Optional[dict] = None) -> None:
        if stage not in _KNOWN_EVENTS:
            raise ValueError(f"unknown event stage {stage!r}")
        event = {
            "scan_id": scan_id,
            "stage": stage,
            "payload": payload or {},
            "ts": time.time(),
        }
        line = json.dumps(event, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
                fh.flush()
            self._fold(event)

    def _fold(self, event: dict) -> None:
        scan_id = event["scan_id"]
        record = self.records.get(scan_id)
        if record is None:
            record = ScanRecord(scan_id=scan_id)
            self.records[scan_id] = record
            self.order.append(scan_id)
        payload = event.get("payload") or {}
        for key, value in payload.items():
            if key not in _RECORD_FIELDS or key == "scan_id":
                raise CorruptManifest(
                    f"event for {scan_id!r} carries unknown field {key!r}"
                )
            setattr(record, key, value)
        stage = event["stage"]
        if stage in STAGES:
            record.stage = stage
        self.n_events += 1

    def record(self, scan_id: str) -> ScanRecord:
        return self.records[scan_id]

    def in_order(self) -> List[ScanRecord]:
        return [self.records[s] for s in self.order]

    def completed(self, record: ScanRecord, stage: str) -> bool:
        """Has the record already finished the given stage?"""
        return stage_index(record.stage) >= stage_index(stage)


def _read_events(path: Path) -> Iterator[dict]:
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            raise CorruptManifest(f"{path}:{lineno}: blank line")
        try:
            event = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorruptManifest(f"{path}:{lineno}: {exc}") from exc
        if not isinstance(event, dict):
            raise CorruptManifest(f"{path}:{lineno}: event is not an object")
        for key in ("scan_id", "stage", "payload"):
            if key not in event:
                raise CorruptManifest(f"{path}:{lineno}: missing {key!r}")
        if event["stage"] not in _KNOWN_EVENTS:
            raise CorruptManifest(
                f"{path}:{lineno}: unknown stage {event['stage']!r}"
            )
        yield event


def load_manifest(path, must_exist: bool = False) -> Manifest:
    p = Path(path)
    if must_exist and not p.exists():
        raise CorruptManifest(f"manifest {p} does not exist")
    return Manifest(p)
