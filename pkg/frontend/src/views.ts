// HTML renderers for the console panes. Pure string templates so they are
// testable without a DOM; main.ts owns mounting and event wiring.

import type { FlaggedRecord, QueueEntry, Report, Role } from "./types.js";
import { canAdjudicate, ConsoleStore } from "./store.js";

function esc(value: unknown): string {
  return String(value ?? "")
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

function fmt(value: number | null, digits = 2): string {
  return value === null || value === undefined ? "—" : value.toFixed(digits);
}

export function renderTile(report: Report): string {
  const classes = ["tile", `status-${report.status}`];
  if (report.status === "escalated") classes.push("flagged");
  return `<article class="${classes.join(" ")}" data-railcar="${esc(report.railcar_id)}"
    data-version="${esc(report.model_version)}">
  <header><strong>${esc(report.railcar_id)}</strong>
    <span class="badge ${esc(report.status)}">${esc(report.status)}</span></header>
  <dl>
    <dt>contamination</dt><dd>${fmt(report.contamination)}%</dd>
    <dt>grade</dt><dd>${esc(report.grade ?? "—")}</dd>
    <dt>layers</dt><dd>${report.eligible_layers}/${report.layer_count}</dd>
    <dt>confidence</dt><dd>reg ${fmt(report.reg_conf)} · cls ${fmt(report.cls_conf)}</dd>
  </dl>
  ${report.anomaly_flags.length
    ? `<p class="flags">${report.anomaly_flags.map(esc).join(", ")}</p>`
    : ""}
</article>`;
}

export function renderBoard(store: ConsoleStore, lineCount: number): string {
  const lanes = store.byLine();
  const sections: string[] = [];
  for (let line = 0; line < lineCount; line += 1) {
    const reports = lanes.get(line) ?? [];
    sections.push(`<section class="lane" data-line="${line}">
  <h2>Line ${line}</h2>
  ${reports.map(renderTile).join("\n") || '<p class="empty">no railcars yet</p>'}
</section>`);
  }
  return sections.join("\n");
}

export function renderHistory(report: Report): string {
  if (!report.override_history.length) return '<p class="empty">no overrides</p>';
  const rows = report.override_history.map(
    (h) => `<tr><td>${esc(h.operator_id)}</td><td>${esc(h.field_name)}</td>
      <td>${esc(h.old_value)}</td><td>${esc(h.new_value)}</td>
      <td>${esc(h.rationale_code)}</td></tr>`,
  );
  return `<table class="history"><thead>
  <tr><th>operator</th><th>field</th><th>old</th><th>new</th><th>rationale</th></tr>
</thead><tbody>${rows.join("")}</tbody></table>`;
}

export function renderOverrideForm(report: Report, rationaleCodes: string[]): string {
  return `<form class="override" data-railcar="${esc(report.railcar_id)}">
  <select name="field_name" required>
    <option value="">field…</option>
    <option value="contamination">contamination</option>
    <option value="grade">grade</option>
  </select>
  <input name="new_value" placeholder="new value" required />
  <select name="rationale_code" required>
    <option value="">rationale…</option>
    ${rationaleCodes.map((c) => `<option value="${esc(c)}">${esc(c)}</option>`).join("")}
  </select>
  <button type="submit" disabled>submit override</button>
  <p class="form-errors"></p>
</form>
${renderHistory(report)}`;
}

export function renderQueue(entries: QueueEntry[]): string {
  if (!entries.length) return '<p class="empty">re-labeling queue is empty</p>';
  const rows = entries.map(
    (e, i) => `<tr><td>${i + 1}</td><td>${esc(e.railcar_id)}</td>
    <td>${esc(e.status)}</td><td>${fmt(e.reg_conf)}</td><td>${fmt(e.cls_conf)}</td>
    <td>${fmt(e.contamination)}</td></tr>`,
  );
  return `<table class="queue"><thead>
  <tr><th>#</th><th>railcar</th><th>status</th><th>reg conf</th>
  <th>cls conf</th><th>contamination</th></tr>
</thead><tbody>${rows.join("")}</tbody></table>`;
}

export function renderInbox(records: FlaggedRecord[], role: Role): string {
  if (!canAdjudicate(role)) return ""; // the pane simply does not exist for inspectors
  if (!records.length) return '<p class="empty">no records awaiting adjudication</p>';
  const items = records.map((r) => {
    const reason = r.needs_tiebreak ? "grade tie" : `STD ${fmt(r.std, 3)}`;
    const raters = r.entries
      .map((e) => `<li>${esc(e.rater_id)}: ${e.contamination.toFixed(2)}% · ${esc(e.grade)}</li>`)
      .join("");
    return `<li class="inbox-item" data-blind="${esc(r.blind_id)}">
  <strong>${esc(r.blind_id)}</strong>
  <span class="badge dispersion">${reason}</span>
  <span>mean ${fmt(r.mean)}</span>
  <ul class="raters">${raters}</ul>
  <button class="adjudicate" data-blind="${esc(r.blind_id)}">resolve…</button>
</li>`;
  });
  return `<ul class="inbox">${items.join("\n")}</ul>`;
}

export function renderConnection(status: "connected" | "stale" | "closed"): string {
  const label = status === "connected" ? "live" : status === "stale" ? "stale — retrying" : "closed";
  return `<span class="conn conn-${status}">${label}</span>`;
}
