import json

import pytest
from fastapi.testclient import TestClient

from conftest import make_toy_model
from scrapline.mil import save_checkpoint
from scrapline.pipeline import PipelineStore
from scrapline.service import build_store, create_app


@pytest.fixture
def store():
    return PipelineStore(model=make_toy_model())


@pytest.fixture
def client(store):
    return TestClient(create_app(store))


def ingest_body(i, railcar="RC-1", layer=None, value=1.0, **kw):
    body = {"dedupe_id": f"d-{i}", "railcar_id": railcar,
            "layer_index": layer if layer is not None else i,
            "features": [value], "timestamp": float(i)}
    body.update(kw)
    return body


def ingest(client, store, i, line=0, **kw):
    version = store.model.version
    return client.post(f"/v{version}/lines/{line}/layers", json=ingest_body(i, **kw))


class TestHealth:
    def test_healthz_reports_version(self, client, store):
        res = client.get("/healthz")
        assert res.status_code == 200
        body = res.json()
        assert body["model_version"] == store.model.version
        assert body["lines"] == 6
        assert body["uptime_seconds"] >= 0


class TestVersionedPaths:
    def test_current_version_accepted(self, client, store):
        res = ingest(client, store, 0)
        assert res.status_code == 200
        assert res.json() == {"status": "accepted", "reason": None}

    def test_retired_version_gone(self, client, store):
        store.retired_versions.add("oldversion01")
        res = client.post("/voldversion01/lines/0/layers", json=ingest_body(0))
        assert res.status_code == 410

    def test_unknown_version_not_found(self, client):
        res = client.post("/vnosuch/lines/0/layers", json=ingest_body(0))
        assert res.status_code == 404

    def test_duplicate_flagged(self, client, store):
        ingest(client, store, 0)
        res = ingest(client, store, 0)
        assert res.json()["status"] == "duplicate"


class TestReports:
    def test_finalize_and_fetch(self, client, store):
        for i in range(4):
            ingest(client, store, i, layer=i, value=1.0)
        version = store.model.version
        res = client.post(f"/v{version}/railcars/RC-1/finalize")
        assert res.status_code == 200
        report = res.json()
        assert report["status"] == "auto"
        assert report["layer_count"] == 4
        fetched = client.get("/railcars/RC-1/report").json()
        assert fetched["contamination"] == report["contamination"]

    def test_unknown_railcar_404(self, client, store):
        version = store.model.version
        assert client.post(f"/v{version}/railcars/RC-404/finalize").status_code == 404
        assert client.get("/railcars/RC-404/report").status_code == 404


class TestOverrideEndpoint:
    def _finalized(self, client, store):
        ingest(client, store, 0, layer=0)
        client.post(f"/v{store.model.version}/railcars/RC-1/finalize")

    def test_override_needs_role_header(self, client, store):
        self._finalized(client, store)
        res = client.post("/railcars/RC-1/override",
                          json={"field_name": "grade", "new_value": "q",
                                "rationale_code": "MISGRADED"})
        assert res.status_code == 401

    def test_override_applies_with_history(self, client, store):
        self._finalized(client, store)
        res = client.post("/railcars/RC-1/override",
                          json={"field_name": "grade", "new_value": "q",
                                "rationale_code": "MISGRADED"},
                          headers={"X-Operator-Role": "inspector",
                                   "X-Operator-Id": "op-7"})
        assert res.status_code == 200
        body = res.json()
        assert body["grade"] == "q" and body["status"] == "overridden"
        assert len(body["override_history"]) == 1
        assert body["override_history"][0]["operator_id"] == "op-7"

    def test_bad_rationale_422(self, client, store):
        self._finalized(client, store)
        res = client.post("/railcars/RC-1/override",
                          json={"field_name": "grade", "new_value": "q",
                                "rationale_code": "BECAUSE"},
                          headers={"X-Operator-Role": "inspector"})
        assert res.status_code == 422

    def test_unknown_role_403(self, client, store):
        self._finalized(client, store)
        res = client.post("/railcars/RC-1/override",
                          json={"field_name": "grade", "new_value": "q",
                                "rationale_code": "MISGRADED"},
                          headers={"X-Operator-Role": "visitor"})
        assert res.status_code == 403


class TestAnnotationEndpoints:
    def _flag_record(self, store, blind="blind-1"):
        store.annotation_store.open_record(blind, ["a", "b", "c"])
        for rater, val in zip("abc", (2.0, 3.0, 4.0)):
            store.annotation_store.submit(blind, rater, val, "3A")

    def test_flagged_requires_senior(self, client, store):
        self._flag_record(store)
        assert client.get("/annotations/flagged").status_code == 401
        res = client.get("/annotations/flagged",
                         headers={"X-Operator-Role": "inspector"})
        assert res.status_code == 403

    def test_flagged_lists_dispersion(self, client, store):
        self._flag_record(store)
        res = client.get("/annotations/flagged", headers={"X-Operator-Role": "senior"})
        assert res.status_code == 200
        rows = res.json()
        assert len(rows) == 1
        assert rows[0]["std"] == pytest.approx(0.8165, abs=1e-4)
        assert len(rows[0]["entries"]) == 3

    def test_inspector_cannot_adjudicate(self, client, store):
        self._flag_record(store)
        res = client.post("/annotations/blind-1/adjudicate",
                          json={"contamination": 2.8},
                          headers={"X-Operator-Role": "inspector"})
        assert res.status_code == 403

    def test_senior_adjudication_resolves(self, client, store):
        self._flag_record(store)
        res = client.post("/annotations/blind-1/adjudicate",
                          json={"contamination": 2.8},
                          headers={"X-Operator-Role": "senior",
                                   "X-Operator-Id": "sen-1"})
        assert res.status_code == 200
        assert res.json()["final_contamination"] == 2.8
        assert res.json()["provenance"] == "adjudicated"
        refreshed = client.get("/annotations/flagged",
                               headers={"X-Operator-Role": "senior"}).json()
        assert refreshed == []

    def test_unknown_record_404(self, client, store):
        res = client.post("/annotations/nope/adjudicate", json={"contamination": 1.0},
                          headers={"X-Operator-Role": "senior"})
        assert res.status_code == 404


class TestQueueEndpoint:
    def test_queue_ordering(self, client, store):
        for i, value in enumerate((0.5, 3.5)):
            ingest(client, store, i, railcar=f"RC-{i}", layer=0, value=value)
            client.post(f"/v{store.model.version}/railcars/RC-{i}/finalize")
        rows = client.get("/queue/active-learning").json()
        # equal confidences: higher predicted contamination first
        assert rows[0]["railcar_id"] == "RC-1"


class TestEventStream:
    def test_backlog_with_cursor_and_ids(self, client, store):
        for i in range(3):
            ingest(client, store, i, railcar=f"RC-{i}", layer=0)
            client.post(f"/v{store.model.version}/railcars/RC-{i}/finalize")
        with client.stream("GET", "/events/stream?once=true") as res:
            text = "".join(res.iter_text())
        events = [e for e in text.split("\n\n") if e.strip()]
        assert len(events) == 3
        assert events[0].startswith("id: 0\n")
        payload = json.loads(events[0].split("data: ", 1)[1])
        assert payload["kind"] == "report_created"

        with client.stream("GET", "/events/stream?once=true&cursor=2") as res:
            tail = "".join(res.iter_text())
        tail_events = [e for e in tail.split("\n\n") if e.strip()]
        assert len(tail_events) == 1
        assert tail_events[0].startswith("id: 2\n")

    def test_last_event_id_resume_no_gaps_or_dupes(self, client, store):
        for i in range(4):
            ingest(client, store, i, railcar=f"RC-{i}", layer=0)
            client.post(f"/v{store.model.version}/railcars/RC-{i}/finalize")
        with client.stream("GET", "/events/stream", headers={"Last-Event-ID": "1"},
                           params={"once": "true"}) as res:
            text = "".join(res.iter_text())
        ids = [int(line.split(": ")[1]) for line in text.splitlines()
               if line.startswith("id:")]
        assert ids == [2, 3]

    def test_max_events_bounds_stream(self, client, store):
        for i in range(5):
            ingest(client, store, i, railcar=f"RC-{i}", layer=0)
            client.post(f"/v{store.model.version}/railcars/RC-{i}/finalize")
        with client.stream("GET", "/events/stream?max_events=2") as res:
            text = "".join(res.iter_text())
        assert text.count("data: ") == 2


class TestBuildStore:
    def test_checkpoint_round_trip_serves(self, tmp_path):
        model = make_toy_model()
        path = tmp_path / "model.ckpt"
        digest = save_checkpoint(model, path)
        store = build_store(str(path))
        assert store.checkpoint_hash == digest
        client = TestClient(create_app(store))
        health = client.get("/healthz").json()
        assert health["checkpoint_hash"] == digest
        assert health["model_version"] == model.version

    def test_tampered_checkpoint_refuses_to_serve(self, tmp_path):
        from scrapline.mil import CheckpointIntegrityError
        model = make_toy_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        text = path.read_text().replace('"seed": 0', '"seed": 1')
        path.write_text(text)
        with pytest.raises(CheckpointIntegrityError):
            build_store(str(path))
