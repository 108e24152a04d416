// Wire types mirroring the service's response models. The console never
// computes domain values; everything rendered comes from these payloads.

export type Role = "inspector" | "senior";

export interface OverrideRecord {
  railcar_id: string;
  operator_id: string;
  field_name: "contamination" | "grade";
  old_value: number | string | null;
  new_value: number | string | null;
  rationale_code: string;
  timestamp: number;
}

export interface Report {
  railcar_id: string;
  line_id: number;
  contamination: number | null;
  grade: string | null;
  class_probs: number[];
  layer_count: number;
  eligible_layers: number;
  reg_conf: number | null;
  cls_conf: number | null;
  anomaly_flags: string[];
  quality_flags: string[];
  model_version: string;
  policy_version: number;
  status: "auto" | "escalated" | "overridden" | "adjudicated";
  override_history: OverrideRecord[];
  event_timestamp: number;
}

export interface QueueEntry {
  railcar_id: string;
  status: string;
  reg_conf: number | null;
  cls_conf: number | null;
  contamination: number | null;
}

export interface RaterEntry {
  rater_id: string;
  contamination: number;
  grade: string;
  timestamp: number;
}

export interface FlaggedRecord {
  blind_id: string;
  mean: number | null;
  std: number | null;
  flagged: boolean;
  needs_tiebreak: boolean;
  adjudication: string;
  entries: RaterEntry[];
}

export interface StreamPayload {
  kind: "report_created" | "report_updated" | "escalation";
  railcar_id: string;
  report: Report;
}

export interface HealthInfo {
  model_version: string;
  checkpoint_hash: string;
  uptime_seconds: number;
  lines: number;
  policy_version: number;
}
