// Browser bootstrap: wires the REST client, the event stream, and the panes.

import { ApiClient, ApiError } from "./api.js";
import { EventStreamClient } from "./sse.js";
import {
  ConsoleStore, canAdjudicate, detectConflict, validateOverride, type OverrideForm,
} from "./store.js";
import type { Role, StreamPayload } from "./types.js";
import {
  renderBoard, renderConnection, renderInbox, renderOverrideForm, renderQueue,
} from "./views.js";

const RATIONALE_CODES = [
  "MISGRADED", "CONTAMINATION_HIGH", "CONTAMINATION_LOW",
  "SENSOR_FAULT", "PARTIAL_UNLOAD", "OTHER",
];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function bootstrap(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const base = params.get("api") ?? "";
  const role = (params.get("role") ?? "inspector") as Role;
  const operator = params.get("operator") ?? "console-operator";
  const api = new ApiClient(base, operator, role);
  const store = new ConsoleStore();

  const health = await api.health();
  el("model-version").textContent =
    `model ${health.model_version} · policy v${health.policy_version}`;
  const lineCount = health.lines;

  if (!canAdjudicate(role)) {
    el("inbox-pane").remove(); // senior-only view is absent, not hidden
  }

  const redraw = () => {
    el("board").innerHTML = renderBoard(store, lineCount);
    document.querySelectorAll<HTMLElement>(".tile").forEach((tile) => {
      tile.addEventListener("click", () => openDetail(tile.dataset.railcar ?? ""));
    });
  };

  const refreshQueue = async () => {
    el("queue").innerHTML = renderQueue(await api.activeLearningQueue());
  };

  const refreshInbox = async () => {
    if (!canAdjudicate(role)) return;
    const records = await api.flaggedAnnotations();
    el("inbox").innerHTML = renderInbox(records, role);
    document.querySelectorAll<HTMLButtonElement>("button.adjudicate").forEach((btn) => {
      btn.addEventListener("click", async () => {
        const blind = btn.dataset.blind ?? "";
        const value = prompt(`senior contamination for ${blind} (blank to keep mean)`);
        const grade = prompt("senior grade (blank to keep)");
        const resolution: { contamination?: number; grade?: string } = {};
        if (value) resolution.contamination = Number(value);
        if (grade) resolution.grade = grade;
        await api.adjudicate(blind, resolution);
        await refreshInbox();
      });
    });
  };

  function openDetail(railcarId: string): void {
    const report = store.reports.get(railcarId);
    if (!report) return;
    const pane = el("detail");
    pane.innerHTML = `<h2>${railcarId}</h2>` + renderOverrideForm(report, RATIONALE_CODES);
    const form = pane.querySelector<HTMLFormElement>("form.override");
    if (!form) return;
    const button = form.querySelector<HTMLButtonElement>("button")!;
    const errorsOut = form.querySelector<HTMLElement>(".form-errors")!;

    const read = (): OverrideForm => ({
      fieldName: (form.elements.namedItem("field_name") as HTMLSelectElement)
        .value as OverrideForm["fieldName"],
      newValue: (form.elements.namedItem("new_value") as HTMLInputElement).value,
      rationaleCode: (form.elements.namedItem("rationale_code") as HTMLSelectElement).value,
    });

    const revalidate = () => {
      const errors = validateOverride(read());
      button.disabled = errors.length > 0;
      errorsOut.textContent = errors.join("; ");
    };
    form.addEventListener("input", revalidate);
    revalidate();

    form.addEventListener("submit", async (ev) => {
      ev.preventDefault();
      const data = read();
      const localBefore = store.reports.get(railcarId)!;
      try {
        const updated = await api.submitOverride(
          railcarId,
          data.fieldName as "contamination" | "grade",
          data.fieldName === "contamination" ? Number(data.newValue) : data.newValue,
          data.rationaleCode,
        );
        const conflicted = detectConflict(localBefore, updated);
        store.reconcile(updated);
        redraw();
        openDetail(railcarId);
        if (conflicted) {
          el("detail").insertAdjacentHTML(
            "afterbegin",
            '<p class="conflict">another operator amended this report; showing refreshed state</p>',
          );
        }
      } catch (err) {
        if (err instanceof ApiError) {
          // surface the server's reason verbatim and show refreshed state
          errorsOut.textContent = `rejected: ${err.detail}`;
          const fresh = await api.getReport(railcarId);
          store.reconcile(fresh);
          redraw();
        } else {
          throw err;
        }
      }
    });
  }

  // prime from REST, then follow the stream from the beginning
  for (const report of await api.listReports()) store.reconcile(report);
  redraw();
  await refreshQueue();
  await refreshInbox();

  const stream = new EventStreamClient(
    `${base}/events/stream`,
    (ev) => {
      if (!ev.data) return;
      const payload = JSON.parse(ev.data) as StreamPayload;
      const id = Number(ev.id ?? "-1");
      if (store.applyStreamEvent(id, payload) === "applied") {
        redraw();
        void refreshQueue();
      }
    },
    { onStatus: (s) => (el("connection").innerHTML = renderConnection(s)) },
  );
  void stream.run();
}

bootstrap().catch((err) => {
  document.body.insertAdjacentHTML(
    "afterbegin",
    `<p class="boot-error">console failed to start: ${String(err)}</p>`,
  );
});
