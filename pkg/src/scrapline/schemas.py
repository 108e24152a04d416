"""Pydantic request/response models for the inference service API."""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, Field


class IngestRequest(BaseModel):
    dedupe_id: str
    railcar_id: str
    layer_index: int = Field(ge=0)
    features: list[float]
    quality_ok: bool = True
    fault_codes: list[str] = Field(default_factory=list)
    timestamp: float = 0.0
    trace_digest: str = ""
    schema_version: int = 1


class IngestResponse(BaseModel):
    status: Literal["accepted", "duplicate", "rejected"]
    reason: Optional[str] = None


class OverrideEventModel(BaseModel):
    railcar_id: str
    operator_id: str
    field_name: str
    old_value: Optional[Union[float, str]] = None
    new_value: Optional[Union[float, str]] = None
    rationale_code: str
    timestamp: float


class ReportModel(BaseModel):
    railcar_id: str
    line_id: int
    contamination: Optional[float] = None
    grade: Optional[str] = None
    class_probs: list[float] = Field(default_factory=list)
    layer_count: int
    eligible_layers: int
    reg_conf: Optional[float] = None
    cls_conf: Optional[float] = None
    layer_conf_min: Optional[float] = None
    layer_conf_mean: Optional[float] = None
    layer_conf_max: Optional[float] = None
    anomaly_flags: list[str] = Field(default_factory=list)
    quality_flags: list[str] = Field(default_factory=list)
    model_version: str
    policy_version: int
    trace_digest: str = ""
    event_timestamp: float = 0.0
    status: str
    override_history: list[OverrideEventModel] = Field(default_factory=list)
    max_layer_inference_seconds: Optional[float] = None


class OverrideRequest(BaseModel):
    field_name: Literal["contamination", "grade"]
    new_value: Union[float, str]
    rationale_code: str


class QueueEntry(BaseModel):
    railcar_id: str
    status: str
    reg_conf: Optional[float] = None
    cls_conf: Optional[float] = None
    contamination: Optional[float] = None


class RaterEntryModel(BaseModel):
    rater_id: str
    contamination: float
    grade: str
    timestamp: float
    excluded_frame_codes: list[str] = Field(default_factory=list)


class FlaggedRecordModel(BaseModel):
    blind_id: str
    mean: Optional[float] = None
    std: Optional[float] = None
    flagged: bool
    needs_tiebreak: bool
    adjudication: str
    entries: list[RaterEntryModel] = Field(default_factory=list)


class AdjudicateRequest(BaseModel):
    contamination: Optional[float] = None
    grade: Optional[str] = None


class AdjudicateResponse(BaseModel):
    blind_id: str
    final_contamination: Optional[float] = None
    final_grade: Optional[str] = None
    provenance: str
    adjudication: str


class HealthResponse(BaseModel):
    model_version: str
    checkpoint_hash: str
    uptime_seconds: float
    lines: int
    policy_version: int
