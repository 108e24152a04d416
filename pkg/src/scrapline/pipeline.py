"""Production loop: partitioned idempotent ingestion, reports, and overrides.

Layer events arrive per unloading line, keyed by a globally unique dedupe
id; the first delivery is appended to that line's write-ahead log and every
redelivery is a no-op, so any retry pattern converges to the single-delivery
state. Finalizing a railcar pools its eligible layers through the frozen
model, applies the escalation policy, and publishes the report to a
cursor-addressable event feed consumed by the operator console. Operator
overrides are audited, immutable, and feed the active-learning queue.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .annotation import AnnotationStore, AuditLog, split_by_railcar
from .mil import Bag, MilModel

RATIONALE_CODES = (
    "MISGRADED",
    "CONTAMINATION_HIGH",
    "CONTAMINATION_LOW",
    "SENSOR_FAULT",
    "PARTIAL_UNLOAD",
    "OTHER",
)

ROLE_INSPECTOR = "inspector"
ROLE_SENIOR = "senior"
ROLES = (ROLE_INSPECTOR, ROLE_SENIOR)


class PipelineError(Exception):
    pass


class UnknownRailcarError(PipelineError):
    pass


class AuthorizationError(PipelineError):
    pass


@dataclass
class EscalationPolicy:
    """Runtime-configurable thresholds; every change bumps the version."""

    contamination_threshold: float = 2.0
    confidence_threshold: float = 0.5
    version: int = 1
    history: list[dict] = field(default_factory=list)

    def update(self, contamination_threshold: float | None = None,
               confidence_threshold: float | None = None) -> None:
        self.history.append({"version": self.version,
                             "contamination_threshold": self.contamination_threshold,
                             "confidence_threshold": self.confidence_threshold})
        if contamination_threshold is not None:
            self.contamination_threshold = contamination_threshold
        if confidence_threshold is not None:
            self.confidence_threshold = confidence_threshold
        self.version += 1

    def evaluate(self, contamination: float | None, reg_conf: float | None,
                 cls_conf: float | None) -> list[str]:
        flags = []
        if contamination is not None and contamination > self.contamination_threshold:
            flags.append("HIGH_CONTAMINATION")
        if reg_conf is not None and cls_conf is not None:
            if min(reg_conf, cls_conf) < self.confidence_threshold:
                flags.append("LOW_CONFIDENCE")
        return flags


@dataclass(frozen=True)
class IngestMessage:
    dedupe_id: str
    line_id: int
    railcar_id: str
    layer_index: int
    features: tuple
    quality_ok: bool = True
    fault_codes: tuple = ()
    timestamp: float = 0.0
    trace_digest: str = ""
    schema_version: int = 1

    def validate(self, feature_dim: int | None) -> str | None:
        if not self.dedupe_id:
            return "missing dedupe id"
        if not self.railcar_id:
            return "missing railcar id"
        if self.layer_index < 0:
            return f"negative layer index {self.layer_index}"
        if self.schema_version != 1:
            return f"unsupported schema version {self.schema_version}"
        if feature_dim is not None and len(self.features) != feature_dim:
            return f"feature vector length {len(self.features)} != model feature_dim {feature_dim}"
        return None


@dataclass
class LayerRecord:
    dedupe_id: str
    line_id: int
    railcar_id: str
    layer_index: int
    features: tuple
    quality_ok: bool
    fault_codes: tuple
    timestamp: float
    trace_digest: str
    reg_output: float | None = None
    cls_probs: tuple | None = None
    inference_seconds: float | None = None


@dataclass
class OverrideEvent:
    railcar_id: str
    operator_id: str
    field_name: str  # contamination | grade
    old_value: object
    new_value: object
    rationale_code: str
    timestamp: float = 0.0


@dataclass
class RailcarReport:
    railcar_id: str
    line_id: int
    contamination: float | None
    grade: str | None
    class_probs: list[float]
    layer_count: int
    eligible_layers: int
    reg_conf: float | None
    cls_conf: float | None
    layer_conf_min: float | None
    layer_conf_mean: float | None
    layer_conf_max: float | None
    anomaly_flags: list[str]
    quality_flags: list[str]
    model_version: str
    policy_version: int
    trace_digest: str
    event_timestamp: float
    status: str = "auto"  # auto | escalated | overridden | adjudicated
    override_history: list[OverrideEvent] = field(default_factory=list)
    max_layer_inference_seconds: float | None = None

    _TRANSITIONS = {
        "auto": {"escalated", "overridden"},
        "escalated": {"overridden", "adjudicated"},
        "overridden": {"overridden", "adjudicated"},
        "adjudicated": {"adjudicated"},
    }

    def transition(self, new_status: str) -> None:
        if new_status == self.status:
            return
        if new_status not in self._TRANSITIONS[self.status]:
            raise PipelineError(f"illegal status transition {self.status} -> {new_status}")
        self.status = new_status


@dataclass
class StreamEvent:
    cursor: int
    kind: str  # report_created | report_updated | escalation
    railcar_id: str
    payload: dict


class PipelineStore:
    """Exactly-once layer store with per-line WAL partitions and report state.

    One lock per line serializes its partition (preserving arrival order);
    per-railcar locks serialize finalize/override races. All timestamps in
    persisted state are event time from the messages, so replays are
    byte-reproducible; wall-clock diagnostics stay out of snapshots.
    """

    def __init__(self, model: MilModel | None = None, policy: EscalationPolicy | None = None,
                 wal_dir: str | Path | None = None, lines: int = 6,
                 annotation_store: AnnotationStore | None = None, clock=time.time):
        self.model = model
        self.policy = policy or EscalationPolicy()
        self.lines = lines
        self.clock = clock
        self.annotation_store = annotation_store or AnnotationStore()
        self.audit = self.annotation_store.audit
        self.retired_versions: set[str] = set()
        self._wal_dir = Path(wal_dir) if wal_dir else None
        self._line_locks = {i: threading.Lock() for i in range(lines)}
        self._car_locks: dict[str, threading.Lock] = {}
        self._car_locks_guard = threading.Lock()
        self._dedupe: set[str] = set()
        self._layers: dict[str, dict[int, LayerRecord]] = {}
        self._layer_dedupe: dict[tuple[str, int], str] = {}
        self._reports: dict[str, RailcarReport] = {}
        self._events: list[StreamEvent] = []
        self._events_lock = threading.Lock()
        self.started_at = time.time()
        if self._wal_dir:
            self._wal_dir.mkdir(parents=True, exist_ok=True)
            self._replay_wal()

    # -- exactly-once ingestion -------------------------------------------

    def ingest_layer(self, msg: IngestMessage) -> tuple[str, str | None]:
        """Returns (status, reason): accepted | duplicate | rejected."""
        feature_dim = self.model.config.feature_dim if self.model else None
        reason = msg.validate(feature_dim)
        if reason:
            return "rejected", reason
        if msg.line_id not in self._line_locks:
            return "rejected", f"unknown line {msg.line_id}"
        with self._line_locks[msg.line_id]:
            if msg.dedupe_id in self._dedupe:
                return "duplicate", None
            key = (msg.railcar_id, msg.layer_index)
            if key in self._layer_dedupe and self._layer_dedupe[key] != msg.dedupe_id:
                return "rejected", (f"layer {msg.layer_index} of {msg.railcar_id} already "
                                    f"ingested under a different dedupe id")
            self._dedupe.add(msg.dedupe_id)
            self._layer_dedupe[key] = msg.dedupe_id
            record = self._build_record(msg)
            self._layers.setdefault(msg.railcar_id, {})[msg.layer_index] = record
            self._append_wal(msg)
        return "accepted", None

    def _build_record(self, msg: IngestMessage) -> LayerRecord:
        record = LayerRecord(
            dedupe_id=msg.dedupe_id, line_id=msg.line_id, railcar_id=msg.railcar_id,
            layer_index=msg.layer_index, features=tuple(msg.features),
            quality_ok=msg.quality_ok, fault_codes=tuple(msg.fault_codes),
            timestamp=msg.timestamp, trace_digest=msg.trace_digest)
        if self.model is not None and msg.quality_ok:
            t0 = time.perf_counter()
            row = np.asarray(msg.features, dtype=np.float64).reshape(1, -1)
            z, _ = self.model.forward_bag(row)
            record.reg_output = self.model.predict_reg(z)
            record.cls_probs = tuple(float(p) for p in self.model.predict_cls(z))
            record.inference_seconds = time.perf_counter() - t0
        return record

    def _append_wal(self, msg: IngestMessage) -> None:
        if not self._wal_dir:
            return
        path = self._wal_dir / f"line-{msg.line_id}.jsonl"
        with path.open("a") as fh:
            fh.write(json.dumps(asdict(msg), sort_keys=True) + "\n")

    def _replay_wal(self) -> None:
        for path in sorted(self._wal_dir.glob("line-*.jsonl")):
            for line in path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                rec["features"] = tuple(rec["features"])
                rec["fault_codes"] = tuple(rec["fault_codes"])
                self.ingest_layer(IngestMessage(**rec))

    # -- finalization and reports -----------------------------------------

    def _car_lock(self, railcar_id: str) -> threading.Lock:
        with self._car_locks_guard:
            return self._car_locks.setdefault(railcar_id, threading.Lock())

    def finalize_railcar(self, railcar_id: str) -> RailcarReport:
        if railcar_id not in self._layers:
            raise UnknownRailcarError(f"no layers ingested for railcar {railcar_id!r}")
        if self.model is None:
            raise PipelineError("no model loaded; cannot finalize")
        with self._car_lock(railcar_id):
            existing = self._reports.get(railcar_id)
            if existing is not None and existing.status in ("overridden", "adjudicated"):
                # operator decisions are never silently recomputed away
                return existing
            records = sorted(self._layers[railcar_id].values(), key=lambda r: r.layer_index)
            eligible = [r for r in records if r.quality_ok]
            quality_flags = sorted({code for r in records for code in r.fault_codes})
            event_ts = max((r.timestamp for r in records), default=0.0)
            line_id = records[0].line_id
            trace_digest = records[0].trace_digest
            if not eligible:
                report = RailcarReport(
                    railcar_id=railcar_id, line_id=line_id, contamination=None, grade=None,
                    class_probs=[], layer_count=len(records), eligible_layers=0,
                    reg_conf=None, cls_conf=None, layer_conf_min=None, layer_conf_mean=None,
                    layer_conf_max=None, anomaly_flags=["NO_ELIGIBLE_LAYERS"],
                    quality_flags=quality_flags, model_version=self.model.version,
                    policy_version=self.policy.version, trace_digest=trace_digest,
                    event_timestamp=event_ts, status="escalated")
            else:
                bag = Bag(railcar_id=railcar_id,
                          instances=np.array([r.features for r in eligible]),
                          layer_indices=[r.layer_index for r in eligible])
                pred = self.model.predict_bag(bag)
                layer_confs = [max(r.cls_probs) for r in eligible if r.cls_probs]
                flags = self.policy.evaluate(pred.contamination, pred.reg_conf, pred.cls_conf)
                report = RailcarReport(
                    railcar_id=railcar_id, line_id=line_id,
                    contamination=float(np.clip(pred.contamination, 0.0, 100.0)),
                    grade=pred.grade, class_probs=[float(p) for p in pred.class_probs],
                    layer_count=len(records), eligible_layers=len(eligible),
                    reg_conf=pred.reg_conf, cls_conf=pred.cls_conf,
                    layer_conf_min=min(layer_confs) if layer_confs else None,
                    layer_conf_mean=float(np.mean(layer_confs)) if layer_confs else None,
                    layer_conf_max=max(layer_confs) if layer_confs else None,
                    anomaly_flags=flags, quality_flags=quality_flags,
                    model_version=self.model.version, policy_version=self.policy.version,
                    trace_digest=trace_digest, event_timestamp=event_ts,
                    status="escalated" if flags else "auto",
                    max_layer_inference_seconds=max(
                        (r.inference_seconds for r in eligible if r.inference_seconds), default=None))
            if existing is not None and existing.status == "escalated" and report.status == "auto":
                # once escalation is triggered, review cannot be skipped
                report.status = "escalated"
                report.anomaly_flags = sorted(set(report.anomaly_flags) | {"PREVIOUSLY_ESCALATED"})
            created = existing is None
            self._reports[railcar_id] = report
        self._publish("report_created" if created else "report_updated", report)
        if report.status == "escalated":
            self._publish("escalation", report)
        self.audit.append("system", "FINALIZE", {"railcar": railcar_id, "status": report.status})
        return report

    def get_report(self, railcar_id: str) -> RailcarReport:
        if railcar_id not in self._reports:
            raise UnknownRailcarError(f"no report for railcar {railcar_id!r}")
        return self._reports[railcar_id]

    def reports(self) -> list[RailcarReport]:
        return [self._reports[k] for k in sorted(self._reports)]

    # -- overrides and the active-learning queue --------------------------

    def apply_override(self, railcar_id: str, operator_id: str, operator_role: str,
                       field_name: str, new_value, rationale_code: str) -> RailcarReport:
        if operator_role not in ROLES:
            raise AuthorizationError(f"unknown role {operator_role!r}")
        if rationale_code not in RATIONALE_CODES:
            raise PipelineError(f"invalid rationale code {rationale_code!r}; "
                                f"one of {RATIONALE_CODES} required")
        if field_name not in ("contamination", "grade"):
            raise PipelineError(f"override field must be contamination or grade, got {field_name!r}")
        with self._car_lock(railcar_id):
            if railcar_id not in self._reports:
                raise UnknownRailcarError(f"no report for railcar {railcar_id!r}")
            report = self._reports[railcar_id]
            old = report.contamination if field_name == "contamination" else report.grade
            event = OverrideEvent(
                railcar_id=railcar_id, operator_id=operator_id, field_name=field_name,
                old_value=old, new_value=new_value, rationale_code=rationale_code,
                timestamp=self.clock())
            if field_name == "contamination":
                report.contamination = float(new_value)
            else:
                if new_value not in self.model.config.class_names:
                    raise PipelineError(f"unknown grade {new_value!r}")
                report.grade = str(new_value)
            report.override_history.append(event)
            report.transition("overridden")
        self.audit.append(operator_id, "OVERRIDE",
                          {"railcar": railcar_id, "field": field_name,
                           "old": old, "new": new_value, "code": rationale_code})
        self._publish("report_updated", report)
        return report

    def active_learning_rank(self, reports: list[RailcarReport] | None = None) -> list[RailcarReport]:
        """Re-labeling priority: overridden first, then least-confident, then
        highest predicted contamination; stable on ties."""
        rows = self.reports() if reports is None else list(reports)

        def key(r: RailcarReport):
            conf = min(r.reg_conf if r.reg_conf is not None else 0.0,
                       r.cls_conf if r.cls_conf is not None else 0.0)
            contamination = r.contamination if r.contamination is not None else 0.0
            return (0 if r.status == "overridden" else 1, conf, -contamination)

        return sorted(rows, key=key)

    # -- event stream -------------------------------------------------------

    def _publish(self, kind: str, report: RailcarReport) -> None:
        with self._events_lock:
            self._events.append(StreamEvent(
                cursor=len(self._events), kind=kind, railcar_id=report.railcar_id,
                payload=report_to_dict(report)))

    def events_since(self, cursor: int) -> list[StreamEvent]:
        with self._events_lock:
            return list(self._events[cursor:])

    # -- snapshots and export ----------------------------------------------

    def snapshot_state(self) -> bytes:
        """Canonical bytes of logical state (layers + reports); wall-clock
        diagnostics are excluded so replay equivalence is byte-comparable."""
        layers = []
        for car in sorted(self._layers):
            for idx in sorted(self._layers[car]):
                r = self._layers[car][idx]
                layers.append({
                    "railcar": r.railcar_id, "layer": r.layer_index, "line": r.line_id,
                    "dedupe": r.dedupe_id, "features": list(r.features),
                    "quality_ok": r.quality_ok, "fault_codes": list(r.fault_codes),
                    "ts": r.timestamp, "trace": r.trace_digest,
                    "reg_output": r.reg_output, "cls_probs": list(r.cls_probs or ()),
                })
        reports = []
        for car in sorted(self._reports):
            d = report_to_dict(self._reports[car])
            d.pop("max_layer_inference_seconds", None)
            reports.append(d)
        return json.dumps({"layers": layers, "reports": reports},
                          sort_keys=True, separators=(",", ":")).encode()

    def export_dataset(self, tag: str, out_dir: str | Path, seed: int | None = None) -> Path:
        """Immutable, digest-sealed snapshot of aggregated labels plus splits.

        Re-exporting an identical store under the same tag is a no-op; a tag
        collision with different content raises.
        """
        records = sorted(self.annotation_store.aggregated_records(), key=lambda r: r.blind_id)
        if seed is None:
            seed = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "big")
        rows = [{
            "railcar": rec.blind_id,
            "contamination": rec.final_contamination,
            "grade": rec.final_grade,
            "provenance": rec.provenance,
            "flagged": rec.flagged,
            "std": rec.std,
        } for rec in records]
        split = (split_by_railcar([r["railcar"] for r in rows], seed=seed)
                 if len(rows) >= 3 else None)
        for row in rows:
            row["partition"] = split.partition_of(row["railcar"]) if split else "train"
        body = json.dumps({"tag": tag, "seed": seed, "rows": rows},
                          sort_keys=True, separators=(",", ":"))
        digest = hashlib.sha256(body.encode()).hexdigest()
        payload = json.dumps({"tag": tag, "seed": seed, "digest": digest, "rows": rows},
                             sort_keys=True, indent=1)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{tag}.json"
        if path.exists():
            existing = json.loads(path.read_text())
            if existing.get("digest") != digest:
                raise PipelineError(f"export tag {tag!r} already exists with different content")
            return path
        path.write_text(payload)
        return path


def report_to_dict(report: RailcarReport) -> dict:
    return asdict(report)
