import { describe, expect, it } from "vitest";

import { ConsoleStore } from "../src/store.js";
import type { FlaggedRecord } from "../src/types.js";
import { renderBoard, renderInbox, renderQueue, renderTile } from "../src/views.js";
import { makeReport } from "./store.test.js";

describe("renderTile", () => {
  it("shows server-provided values only", () => {
    const html = renderTile(makeReport({ contamination: 1.234, grade: "3AH" }));
    expect(html).toContain("RC-1");
    expect(html).toContain("1.23%");
    expect(html).toContain("3AH");
    expect(html).toContain("10/10");
  });

  it("flags escalated reports visually", () => {
    const html = renderTile(makeReport({
      status: "escalated", anomaly_flags: ["HIGH_CONTAMINATION"],
    }));
    expect(html).toContain("flagged");
    expect(html).toContain("HIGH_CONTAMINATION");
  });

  it("escapes untrusted strings", () => {
    const html = renderTile(makeReport({ railcar_id: "<img>" }));
    expect(html).not.toContain("<img>");
    expect(html).toContain("&lt;img&gt;");
  });
});

describe("renderBoard", () => {
  it("renders one lane per line even when empty", () => {
    const store = new ConsoleStore();
    store.reconcile(makeReport({ railcar_id: "A", line_id: 1 }));
    const html = renderBoard(store, 3);
    expect(html.match(/class="lane"/g)).toHaveLength(3);
    expect(html).toContain("Line 2");
    expect(html).toContain("no railcars yet");
  });
});

describe("renderQueue", () => {
  it("numbers entries in server order", () => {
    const html = renderQueue([
      { railcar_id: "B", status: "overridden", reg_conf: 0.2, cls_conf: 0.3, contamination: 2 },
      { railcar_id: "A", status: "auto", reg_conf: 0.9, cls_conf: 0.9, contamination: 1 },
    ]);
    expect(html.indexOf("B")).toBeLessThan(html.indexOf("A"));
  });
});

describe("renderInbox", () => {
  const record: FlaggedRecord = {
    blind_id: "blind-1",
    mean: 3.0,
    std: 0.8165,
    flagged: true,
    needs_tiebreak: false,
    adjudication: "pending",
    entries: [
      { rater_id: "r0", contamination: 2, grade: "3A", timestamp: 0 },
      { rater_id: "r1", contamination: 3, grade: "3A", timestamp: 0 },
      { rater_id: "r2", contamination: 4, grade: "3A1", timestamp: 0 },
    ],
  };

  it("lists dispersion badges and rater values for seniors", () => {
    const html = renderInbox([record], "senior");
    expect(html).toContain("blind-1");
    expect(html).toContain("STD 0.817");
    expect(html).toContain("r2: 4.00%");
  });

  it("is absent entirely for inspectors", () => {
    expect(renderInbox([record], "inspector")).toBe("");
  });

  it("shows an explicit empty state", () => {
    expect(renderInbox([], "senior")).toContain("no records awaiting adjudication");
  });
});
