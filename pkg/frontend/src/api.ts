// Thin REST client for the acceptance service. All mutations go through the
// documented endpoints; the console holds no business rules of its own.

import type { FlaggedRecord, HealthInfo, QueueEntry, Report, Role } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`${status}: ${detail}`);
  }
}

export class RoleError extends Error {}

async function parseError(res: Response): Promise<ApiError> {
  let detail = res.statusText;
  try {
    const body = await res.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(res.status, detail);
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    public operatorId: string,
    public role: Role,
    private fetchFn: typeof fetch = fetch,
  ) {}

  private headers(): Record<string, string> {
    return {
      "Content-Type": "application/json",
      "X-Operator-Id": this.operatorId,
      "X-Operator-Role": this.role,
    };
  }

  private async get<T>(path: string, withRole = false): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, {
      headers: withRole ? this.headers() : undefined,
    });
    if (!res.ok) throw await parseError(res);
    return (await res.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(body),
    });
    if (!res.ok) throw await parseError(res);
    return (await res.json()) as T;
  }

  health(): Promise<HealthInfo> {
    return this.get("/healthz");
  }

  listReports(): Promise<Report[]> {
    return this.get("/railcars");
  }

  getReport(railcarId: string): Promise<Report> {
    return this.get(`/railcars/${encodeURIComponent(railcarId)}/report`);
  }

  activeLearningQueue(): Promise<QueueEntry[]> {
    return this.get("/queue/active-learning");
  }

  submitOverride(
    railcarId: string,
    fieldName: "contamination" | "grade",
    newValue: number | string,
    rationaleCode: string,
  ): Promise<Report> {
    return this.post(`/railcars/${encodeURIComponent(railcarId)}/override`, {
      field_name: fieldName,
      new_value: newValue,
      rationale_code: rationaleCode,
    });
  }

  // senior-only surfaces; blocked client-side before the server rejects too
  flaggedAnnotations(): Promise<FlaggedRecord[]> {
    if (this.role !== "senior") {
      return Promise.reject(new RoleError("adjudication requires the senior role"));
    }
    return this.get("/annotations/flagged", true);
  }

  adjudicate(
    blindId: string,
    resolution: { contamination?: number; grade?: string },
  ): Promise<FlaggedRecord> {
    if (this.role !== "senior") {
      return Promise.reject(new RoleError("adjudication requires the senior role"));
    }
    return this.post(`/annotations/${encodeURIComponent(blindId)}/adjudicate`, resolution);
  }
}
