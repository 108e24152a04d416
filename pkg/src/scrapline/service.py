"""Versioned HTTP inference service over the pipeline store.

Requests pin the model version in the path; retired versions answer 410 so
clients learn a rollover happened. The event stream is server-push with a
resumable cursor (``Last-Event-ID`` header or ``cursor`` query parameter),
and roles arrive as static headers: overrides need inspector or senior,
adjudication needs senior.
"""

from __future__ import annotations

import asyncio
import json
import time

from fastapi import FastAPI, Header, HTTPException, Query, Request
from fastapi.responses import StreamingResponse

from . import schemas
from .annotation import AnnotationError, BlindnessError
from .mil import load_checkpoint
from .pipeline import (
    AuthorizationError, EscalationPolicy, IngestMessage, PipelineError,
    PipelineStore, ROLE_SENIOR, ROLES, UnknownRailcarError, report_to_dict,
)


def require_role(role: str | None, allowed: tuple[str, ...]) -> str:
    if role is None:
        raise HTTPException(status_code=401, detail="missing X-Operator-Role header")
    if role not in ROLES:
        raise HTTPException(status_code=403, detail=f"unknown role {role!r}")
    if role not in allowed:
        raise HTTPException(status_code=403, detail=f"role {role!r} may not perform this action")
    return role


def create_app(store: PipelineStore) -> FastAPI:
    app = FastAPI(title="scrapline inference service", version="0.1.0")
    app.state.store = store

    def check_version(version: str) -> None:
        current = store.model.version if store.model else "untrained"
        if version == current:
            return
        if version in store.retired_versions:
            raise HTTPException(status_code=410, detail=f"model version {version} is retired")
        raise HTTPException(status_code=404, detail=f"unknown model version {version}")

    @app.post("/v{version}/lines/{line_id}/layers", response_model=schemas.IngestResponse)
    def ingest_layer(version: str, line_id: int, body: schemas.IngestRequest):
        check_version(version)
        status, reason = store.ingest_layer(IngestMessage(
            dedupe_id=body.dedupe_id, line_id=line_id, railcar_id=body.railcar_id,
            layer_index=body.layer_index, features=tuple(body.features),
            quality_ok=body.quality_ok, fault_codes=tuple(body.fault_codes),
            timestamp=body.timestamp, trace_digest=body.trace_digest,
            schema_version=body.schema_version))
        return schemas.IngestResponse(status=status, reason=reason)

    @app.post("/v{version}/railcars/{railcar_id}/finalize", response_model=schemas.ReportModel)
    def finalize_railcar(version: str, railcar_id: str):
        check_version(version)
        try:
            return report_to_dict(store.finalize_railcar(railcar_id))
        except UnknownRailcarError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/railcars/{railcar_id}/report", response_model=schemas.ReportModel)
    def get_report(railcar_id: str):
        try:
            return report_to_dict(store.get_report(railcar_id))
        except UnknownRailcarError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/railcars", response_model=list[schemas.ReportModel])
    def list_reports():
        return [report_to_dict(r) for r in store.reports()]

    @app.post("/railcars/{railcar_id}/override", response_model=schemas.ReportModel)
    def apply_override(railcar_id: str, body: schemas.OverrideRequest,
                       x_operator_role: str | None = Header(default=None),
                       x_operator_id: str = Header(default="anonymous")):
        require_role(x_operator_role, ROLES)
        try:
            report = store.apply_override(
                railcar_id, x_operator_id, x_operator_role,
                body.field_name, body.new_value, body.rationale_code)
        except UnknownRailcarError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except AuthorizationError as exc:
            raise HTTPException(status_code=403, detail=str(exc))
        except PipelineError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return report_to_dict(report)

    @app.get("/queue/active-learning", response_model=list[schemas.QueueEntry])
    def active_learning_queue():
        return [schemas.QueueEntry(
            railcar_id=r.railcar_id, status=r.status, reg_conf=r.reg_conf,
            cls_conf=r.cls_conf, contamination=r.contamination)
            for r in store.active_learning_rank()]

    @app.get("/annotations/flagged", response_model=list[schemas.FlaggedRecordModel])
    def flagged_annotations(x_operator_role: str | None = Header(default=None)):
        require_role(x_operator_role, (ROLE_SENIOR,))
        out = []
        for rec in sorted(store.annotation_store.flagged_records(), key=lambda r: r.blind_id):
            out.append(schemas.FlaggedRecordModel(
                blind_id=rec.blind_id, mean=rec.mean, std=rec.std, flagged=rec.flagged,
                needs_tiebreak=rec.needs_tiebreak, adjudication=rec.adjudication,
                entries=[schemas.RaterEntryModel(
                    rater_id=e.rater_id, contamination=e.contamination, grade=e.grade,
                    timestamp=e.timestamp, excluded_frame_codes=list(e.excluded_frame_codes))
                    for e in rec.entries]))
        return out

    @app.post("/annotations/{blind_id}/adjudicate", response_model=schemas.AdjudicateResponse)
    def adjudicate(blind_id: str, body: schemas.AdjudicateRequest,
                   x_operator_role: str | None = Header(default=None),
                   x_operator_id: str = Header(default="anonymous")):
        require_role(x_operator_role, (ROLE_SENIOR,))
        try:
            rec = store.annotation_store.adjudicate(
                blind_id, x_operator_id, contamination=body.contamination, grade=body.grade)
        except BlindnessError as exc:
            raise HTTPException(status_code=403, detail=str(exc))
        except AnnotationError as exc:
            status = 404 if "unknown record" in str(exc) else 422
            raise HTTPException(status_code=status, detail=str(exc))
        return schemas.AdjudicateResponse(
            blind_id=rec.blind_id, final_contamination=rec.final_contamination,
            final_grade=rec.final_grade, provenance=rec.provenance,
            adjudication=rec.adjudication)

    @app.get("/events/stream")
    async def events_stream(request: Request,
                            cursor: int = Query(default=0, ge=0),
                            max_events: int | None = Query(default=None, ge=1),
                            once: bool = Query(default=False),
                            last_event_id: str | None = Header(default=None)):
        start = cursor
        if last_event_id is not None:
            try:
                start = int(last_event_id) + 1
            except ValueError:
                raise HTTPException(status_code=422, detail="Last-Event-ID must be an integer")

        async def gen():
            position = start
            sent = 0
            while True:
                for event in store.events_since(position):
                    payload = json.dumps({"kind": event.kind,
                                          "railcar_id": event.railcar_id,
                                          "report": event.payload})
                    yield f"id: {event.cursor}\nevent: {event.kind}\ndata: {payload}\n\n"
                    position = event.cursor + 1
                    sent += 1
                    if max_events is not None and sent >= max_events:
                        return
                if once:
                    return
                if await request.is_disconnected():
                    return
                await asyncio.sleep(0.05)

        return StreamingResponse(gen(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    @app.get("/healthz", response_model=schemas.HealthResponse)
    def healthz():
        return schemas.HealthResponse(
            model_version=store.model.version if store.model else "none",
            checkpoint_hash=getattr(store, "checkpoint_hash", ""),
            uptime_seconds=time.time() - store.started_at,
            lines=store.lines,
            policy_version=store.policy.version)

    return app


def build_store(checkpoint_path: str, wal_dir: str | None = None, lines: int = 6,
                contamination_threshold: float = 2.0,
                confidence_threshold: float = 0.5,
                annotations_dir: str | None = None) -> PipelineStore:
    """Load a hash-verified checkpoint and assemble the serving store.

    A corrupt checkpoint raises before any state is touched, so the service
    refuses to start on integrity failure. With a WAL directory the audit
    log persists next to the line partitions; an annotations directory
    seeds the adjudication inbox from a prior double-blind run.
    """
    from pathlib import Path

    from .annotation import AnnotationStore, AuditLog, record_from_dict

    model, digest = load_checkpoint(checkpoint_path)
    policy = EscalationPolicy(contamination_threshold=contamination_threshold,
                              confidence_threshold=confidence_threshold)
    annotation_store = None
    if wal_dir is not None:
        Path(wal_dir).mkdir(parents=True, exist_ok=True)
        annotation_store = AnnotationStore(audit=AuditLog(Path(wal_dir) / "audit.jsonl"))
    store = PipelineStore(model=model, policy=policy, wal_dir=wal_dir, lines=lines,
                          annotation_store=annotation_store)
    store.checkpoint_hash = digest
    if annotations_dir is not None:
        records_path = Path(annotations_dir) / "records.jsonl"
        for line in records_path.read_text().splitlines():
            if line.strip():
                store.annotation_store.load_record(record_from_dict(json.loads(line)))
    return store
