// Client-side cache of server truth, keyed by railcar and report version.
// Events replace a tile only when they carry something newer; the store
// never derives domain values, it just files what the server said.

import type { Report, Role, StreamPayload } from "./types.js";

export function reportFingerprint(report: Report): string {
  return [
    report.model_version,
    report.status,
    report.contamination ?? "",
    report.grade ?? "",
    report.override_history.length,
    report.anomaly_flags.join("|"),
  ].join("#");
}

export type ApplyResult = "applied" | "duplicate" | "stale";

export class ConsoleStore {
  readonly reports = new Map<string, Report>();
  private fingerprints = new Map<string, string>();
  lastEventId = -1;
  escalations: string[] = [];

  applyStreamEvent(id: number, payload: StreamPayload): ApplyResult {
    if (id <= this.lastEventId) return "stale";
    this.lastEventId = id;
    if (payload.kind === "escalation") {
      if (!this.escalations.includes(payload.railcar_id)) {
        this.escalations.push(payload.railcar_id);
      }
      // escalation events reference a report already delivered; refresh it
    }
    const fp = reportFingerprint(payload.report);
    if (this.fingerprints.get(payload.railcar_id) === fp) return "duplicate";
    this.reports.set(payload.railcar_id, payload.report);
    this.fingerprints.set(payload.railcar_id, fp);
    return "applied";
  }

  /** Reconcile with a fresh server response (e.g. after an override POST). */
  reconcile(report: Report): void {
    this.reports.set(report.railcar_id, report);
    this.fingerprints.set(report.railcar_id, reportFingerprint(report));
  }

  byLine(): Map<number, Report[]> {
    const lanes = new Map<number, Report[]>();
    for (const report of this.reports.values()) {
      const lane = lanes.get(report.line_id) ?? [];
      lane.push(report);
      lanes.set(report.line_id, lane);
    }
    for (const lane of lanes.values()) {
      lane.sort((a, b) => a.railcar_id.localeCompare(b.railcar_id));
    }
    return lanes;
  }

  escalated(): Report[] {
    return [...this.reports.values()].filter((r) => r.status === "escalated");
  }
}

export function canAdjudicate(role: Role): boolean {
  return role === "senior";
}

export function canOverride(role: Role): boolean {
  return role === "inspector" || role === "senior";
}

/** True when the server's history shows edits we never saw locally, i.e.
 * another operator amended the report while this session was composing. */
export function detectConflict(local: Report, server: Report): boolean {
  return server.override_history.length > local.override_history.length + 1;
}

export interface OverrideForm {
  fieldName: "contamination" | "grade" | "";
  newValue: string;
  rationaleCode: string;
}

/** Validation the submit button is gated on; the server re-checks anyway. */
export function validateOverride(form: OverrideForm): string[] {
  const errors: string[] = [];
  if (!form.fieldName) errors.push("choose a field to amend");
  if (!form.rationaleCode) errors.push("rationale code is required");
  if (form.newValue.trim() === "") errors.push("new value is required");
  if (form.fieldName === "contamination" && form.newValue.trim() !== "") {
    const value = Number(form.newValue);
    if (Number.isNaN(value)) errors.push("contamination must be a number");
    else if (value < 0 || value > 100) errors.push("contamination must be 0-100");
  }
  return errors;
}
