"""Double-blind railcar labeling: routing, aggregation, adjudication, audit.

Raters never see one another's assessments or the emerging consensus;
railcar identifiers are pseudonymized before routing. Continuous labels are
aggregated by the mean with a population-std dispersion flag, categorical
grades by strict majority vote with senior tiebreak, and every action lands
in an append-only audit log with gapless sequence numbers. Dataset splits
are cut at the railcar level so layers never leak across partitions.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DISPERSION_FLAG_THRESHOLD = 0.4  # flag when population std strictly exceeds this
GRADES = ("3A", "3A1", "3AH", "cast_iron")
NEEDS_TIEBREAK = "needs_tiebreak"


class AnnotationError(Exception):
    pass


class BlindnessError(AnnotationError):
    """Attempt to read peer labels before aggregation."""


def pseudonymize(railcar_id: str, salt: str) -> str:
    """Keyed one-way digest of a railcar id; stable per (id, salt)."""
    if not railcar_id:
        raise AnnotationError("empty railcar id")
    if not salt:
        raise AnnotationError("empty salt")
    return hmac.new(salt.encode(), railcar_id.encode(), hashlib.sha256).hexdigest()[:24]


def route(railcar_id: str, rater_pool: list[str], k: int = 3, seed: int = 0) -> list[str]:
    """Choose k distinct raters uniformly, deterministic per (railcar, seed)."""
    if len(rater_pool) < k:
        raise AnnotationError(f"rater pool of {len(rater_pool)} cannot cover k={k}")
    key = int.from_bytes(hashlib.sha256(railcar_id.encode()).digest()[:4], "big")
    rng = np.random.default_rng([seed, key])
    picks = rng.choice(len(rater_pool), size=k, replace=False)
    return [rater_pool[i] for i in sorted(picks)]


def aggregate_continuous(labels) -> tuple[float, float, bool]:
    """(mean, population std, flagged). Flag trips when std exceeds 0.4."""
    vals = np.asarray(list(labels), dtype=np.float64)
    if vals.size < 3:
        raise AnnotationError(f"continuous aggregation needs >= 3 labels, got {vals.size}")
    if vals.min() < 0 or vals.max() > 100:
        raise AnnotationError("labels must lie in [0, 100]")
    mean = float(vals.mean())
    std = float(vals.std())  # population std (divide by n)
    return mean, std, std > DISPERSION_FLAG_THRESHOLD


def aggregate_categorical(labels, taxonomy: tuple[str, ...] = GRADES) -> str:
    """Strict-majority grade, or the needs_tiebreak sentinel when none exists."""
    votes = list(labels)
    if len(votes) < 3:
        raise AnnotationError(f"categorical aggregation needs >= 3 labels, got {len(votes)}")
    for v in votes:
        if v not in taxonomy:
            raise AnnotationError(f"unknown grade label {v!r}")
    counts: dict[str, int] = {}
    for v in votes:
        counts[v] = counts.get(v, 0) + 1
    top = max(counts.values())
    if top * 2 > len(votes):
        return next(g for g, c in counts.items() if c == top)
    return NEEDS_TIEBREAK


@dataclass
class RaterEntry:
    rater_id: str
    contamination: float
    grade: str
    timestamp: float
    excluded_frame_codes: list[str] = field(default_factory=list)


@dataclass
class AnnotationRecord:
    blind_id: str
    routed_raters: list[str]
    entries: list[RaterEntry] = field(default_factory=list)
    aggregated: bool = False
    mean: float | None = None
    std: float | None = None
    flagged: bool = False
    grade: str | None = None
    needs_tiebreak: bool = False
    adjudication: str = "none"  # none | pending | resolved
    final_contamination: float | None = None
    final_grade: str | None = None
    provenance: str = "consensus"

    def awaiting_adjudication(self) -> bool:
        return self.adjudication == "pending"


@dataclass
class AuditEvent:
    seq: int
    actor: str
    action: str
    payload_digest: str
    timestamp: float


class AuditLog:
    """Append-only event log with gapless, strictly increasing sequence numbers."""

    def __init__(self, path: str | Path | None = None, clock=time.time):
        self._lock = threading.Lock()
        self._events: list[AuditEvent] = []
        self._path = Path(path) if path else None
        self._clock = clock
        if self._path and self._path.exists():
            for line in self._path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._events.append(AuditEvent(**rec))

    def append(self, actor: str, action: str, payload) -> AuditEvent:
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]
        with self._lock:
            event = AuditEvent(seq=len(self._events), actor=actor, action=action,
                               payload_digest=digest, timestamp=self._clock())
            self._events.append(event)
            if self._path:
                with self._path.open("a") as fh:
                    fh.write(json.dumps(event.__dict__, sort_keys=True) + "\n")
            return event

    def events(self) -> list[AuditEvent]:
        with self._lock:
            return list(self._events)

    def verify_gapless(self) -> bool:
        with self._lock:
            return all(e.seq == i for i, e in enumerate(self._events))


class AnnotationStore:
    """Blind label submissions with per-record serialization and audit trail.

    Peer labels are unreadable until a record aggregates; raters reach only
    their own entry through rater_view.
    """

    def __init__(self, required_raters: int = 3, audit: AuditLog | None = None,
                 taxonomy: tuple[str, ...] = GRADES, clock=time.time):
        self.required_raters = required_raters
        self.taxonomy = taxonomy
        self.audit = audit or AuditLog()
        self._records: dict[str, AnnotationRecord] = {}
        self._lock = threading.Lock()
        self._clock = clock

    def open_record(self, blind_id: str, routed_raters: list[str]) -> AnnotationRecord:
        with self._lock:
            if blind_id in self._records:
                raise AnnotationError(f"record {blind_id!r} already open")
            if len(set(routed_raters)) < self.required_raters:
                raise AnnotationError(
                    f"need >= {self.required_raters} distinct raters, got {routed_raters}")
            rec = AnnotationRecord(blind_id=blind_id, routed_raters=list(routed_raters))
            self._records[blind_id] = rec
        self.audit.append("system", "ROUTE", {"blind_id": blind_id, "raters": routed_raters})
        return rec

    def submit(self, blind_id: str, rater_id: str, contamination: float, grade: str,
               excluded_frame_codes: list[str] | None = None) -> None:
        with self._lock:
            rec = self._require(blind_id)
            if rec.aggregated:
                raise AnnotationError(f"record {blind_id!r} already aggregated")
            if rater_id not in rec.routed_raters:
                raise AnnotationError(f"rater {rater_id!r} was not routed to {blind_id!r}")
            if any(e.rater_id == rater_id for e in rec.entries):
                raise AnnotationError(f"rater {rater_id!r} already labeled {blind_id!r}")
            if grade not in self.taxonomy:
                raise AnnotationError(f"unknown grade label {grade!r}")
            rec.entries.append(RaterEntry(
                rater_id=rater_id, contamination=float(contamination), grade=grade,
                timestamp=self._clock(), excluded_frame_codes=excluded_frame_codes or []))
            ready = len(rec.entries) >= self.required_raters
        self.audit.append(rater_id, "SUBMIT", {"blind_id": blind_id})
        if ready:
            self.aggregate(blind_id)

    def aggregate(self, blind_id: str) -> AnnotationRecord:
        """Aggregate a fully labeled record; re-running is a no-op."""
        with self._lock:
            rec = self._require(blind_id)
            if rec.aggregated:
                return rec
            if len(rec.entries) < self.required_raters:
                raise AnnotationError(
                    f"record {blind_id!r} has {len(rec.entries)} of "
                    f"{self.required_raters} required labels")
            mean, std, flagged = aggregate_continuous([e.contamination for e in rec.entries])
            grade = aggregate_categorical([e.grade for e in rec.entries], self.taxonomy)
            rec.mean, rec.std, rec.flagged = mean, std, flagged
            rec.needs_tiebreak = grade == NEEDS_TIEBREAK
            rec.grade = None if rec.needs_tiebreak else grade
            rec.final_contamination = mean
            rec.final_grade = rec.grade
            rec.aggregated = True
            if rec.flagged or rec.needs_tiebreak:
                rec.adjudication = "pending"
        self.audit.append("system", "AGGREGATE",
                          {"blind_id": blind_id, "mean": rec.mean, "std": rec.std,
                           "flagged": rec.flagged, "needs_tiebreak": rec.needs_tiebreak})
        return rec

    def adjudicate(self, blind_id: str, senior_id: str,
                   contamination: float | None = None, grade: str | None = None) -> AnnotationRecord:
        """Senior resolution of a flagged or tied record; originals retained."""
        with self._lock:
            rec = self._require(blind_id)
            if not rec.aggregated or rec.adjudication != "pending":
                raise AnnotationError(f"record {blind_id!r} is not awaiting adjudication")
            if rec.flagged and contamination is None:
                raise AnnotationError("flagged record needs a senior contamination label")
            if rec.needs_tiebreak and grade is None:
                raise AnnotationError("tied record needs a senior grade label")
            if grade is not None and grade not in self.taxonomy:
                raise AnnotationError(f"unknown grade label {grade!r}")
            if contamination is not None:
                rec.final_contamination = float(contamination)
            if grade is not None:
                rec.final_grade = grade
                rec.grade = grade
                rec.needs_tiebreak = False
            rec.adjudication = "resolved"
            rec.provenance = "adjudicated"
        self.audit.append(senior_id, "ADJUDICATE",
                          {"blind_id": blind_id, "contamination": contamination, "grade": grade})
        return rec

    def rater_view(self, blind_id: str, rater_id: str) -> RaterEntry | None:
        """A rater's own entry; peers' labels stay invisible pre-aggregation."""
        with self._lock:
            rec = self._require(blind_id)
            for e in rec.entries:
                if e.rater_id == rater_id:
                    return e
            return None

    def get_record(self, blind_id: str) -> AnnotationRecord:
        """Full record, readable only after aggregation."""
        with self._lock:
            rec = self._require(blind_id)
            if not rec.aggregated:
                raise BlindnessError(
                    f"record {blind_id!r} is not aggregated; peer labels are blind")
            return rec

    def flagged_records(self) -> list[AnnotationRecord]:
        with self._lock:
            return [r for r in self._records.values() if r.awaiting_adjudication()]

    def aggregated_records(self) -> list[AnnotationRecord]:
        with self._lock:
            return [r for r in self._records.values() if r.aggregated]

    def record_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._records)

    def _require(self, blind_id: str) -> AnnotationRecord:
        if blind_id not in self._records:
            raise AnnotationError(f"unknown record {blind_id!r}")
        return self._records[blind_id]

    def load_record(self, record: AnnotationRecord) -> None:
        """Install an already-aggregated record (snapshot import)."""
        if not record.aggregated:
            raise AnnotationError(f"record {record.blind_id!r} is not aggregated")
        with self._lock:
            self._records[record.blind_id] = record


def record_to_dict(rec: AnnotationRecord) -> dict:
    out = dict(rec.__dict__)
    out["entries"] = [e.__dict__ for e in rec.entries]
    return out


def record_from_dict(data: dict) -> AnnotationRecord:
    entries = [RaterEntry(**e) for e in data.get("entries", [])]
    fields = {k: v for k, v in data.items() if k != "entries"}
    return AnnotationRecord(entries=entries, **fields)


PARTITIONS = ("train", "val", "test")
TABLE_SPLIT_RATIOS = (1504 / 2032, 305 / 2032, 223 / 2032)


@dataclass
class SplitAssignment:
    partitions: dict[str, str]  # railcar id -> partition name
    sizes: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def partition_of(self, railcar_id: str) -> str:
        return self.partitions[railcar_id]

    def members(self, name: str) -> list[str]:
        return sorted(r for r, p in self.partitions.items() if p == name)


def split_by_railcar(railcars, ratios=TABLE_SPLIT_RATIOS, seed: int = 0,
                     names: tuple[str, ...] = PARTITIONS) -> SplitAssignment:
    """Seeded shuffle then largest-remainder cut; sizes land within +-1 of exact."""
    cars = list(railcars)
    if len(set(cars)) != len(cars):
        raise AnnotationError("duplicate railcar ids in split input")
    if len(ratios) != len(names):
        raise AnnotationError(f"{len(ratios)} ratios for {len(names)} partitions")
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise AnnotationError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    nonzero = sum(1 for r in ratios if r > 0)
    if len(cars) < nonzero:
        raise AnnotationError(f"{len(cars)} railcars cannot fill {nonzero} partitions")

    rng = np.random.default_rng(seed)
    order = [cars[i] for i in rng.permutation(len(cars))]
    n = len(cars)
    exact = [r * n for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    leftovers = n - sum(counts)
    by_fraction = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_fraction[:leftovers]:
        counts[i] += 1

    assignment: dict[str, str] = {}
    cursor = 0
    for name, count in zip(names, counts):
        for car in order[cursor:cursor + count]:
            assignment[car] = name
        cursor += count
    warnings = [f"partition {name!r} is empty" for name, c in zip(names, counts) if c == 0]
    return SplitAssignment(partitions=assignment,
                           sizes={name: c for name, c in zip(names, counts)},
                           warnings=warnings)
